// SPDX-License-Identifier: Apache-2.0
#include "knowtrace/pipeline.hpp"

#include "knowtrace/analysis.hpp"
#include "knowtrace/checkpoint.hpp"
#include "knowtrace/hash.hpp"
#include "knowtrace/interventions.hpp"
#include "knowtrace/report_io.hpp"
#include "knowtrace/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <map>
#include <set>

namespace knowtrace::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using config::PipelineConfig;
using taxonomy::Category;
using taxonomy::LabeledSample;

namespace {

class Timer {
 public:
  Timer() : start_(std::chrono::steady_clock::now()) {}
  long ms() const {
    return static_cast<long>(std::chrono::duration_cast<std::chrono::milliseconds>(
                                 std::chrono::steady_clock::now() - start_)
                                 .count());
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

struct WorldBundle {
  worldgen::World world;
  std::vector<int> corpus;
  std::string world_dir_hash;  // hash of triples.jsonl
};

WorldBundle load_world_dir(const PipelineConfig& cfg, const std::string& world_dir,
                           bool with_corpus) {
  const fs::path triples_path = fs::path(world_dir) / "triples.jsonl";
  if (!fs::exists(triples_path))
    throw IoError("missing triples file: " + triples_path.string());
  io::read_manifest(world_dir);  // verifies output hashes

  WorldBundle bundle;
  worldgen::LoadResult loaded = worldgen::load_triples_jsonl(triples_path.string());
  worldgen::WorldConfig wcfg = cfg.world;
  wcfg.vocab_size = cfg.model.vocab_size;
  bundle.world = worldgen::build_world_from_triples(std::move(loaded.triples), wcfg);
  bundle.world_dir_hash = io::input_hash(triples_path);
  if (with_corpus) {
    const fs::path corpus_path = fs::path(world_dir) / "corpus.bin";
    if (!fs::exists(corpus_path)) throw IoError("missing corpus file: " + corpus_path.string());
    bundle.corpus = worldgen::load_corpus(corpus_path.string());
  }
  return bundle;
}

const char* split_name(Split s) { return s == Split::Holdout ? "holdout" : "pool"; }

Split split_from_name(const std::string& s) {
  if (s == "holdout") return Split::Holdout;
  if (s == "pool") return Split::Pool;
  throw IoError("unknown split name: " + s);
}

json sample_to_json(const LabeledSample& s, Split split, const worldgen::Vocab& vocab) {
  json j;
  j["id"] = s.id;
  j["subject_id"] = s.subject_id;
  j["relation"] = worldgen::relation_name(s.relation);
  j["prompt"] = vocab.decode(s.query.tokens);
  j["prompt_tokens"] = s.query.tokens;
  j["subject_span"] = json::array({s.query.subject_begin, s.query.subject_end});
  j["gold"] = vocab.decode(s.query.gold_tokens);
  j["gold_tokens"] = s.query.gold_tokens;
  j["prediction"] = vocab.decode(s.prediction);
  j["prediction_tokens"] = s.prediction;
  j["correct"] = s.label.correct;
  j["no_entity"] = s.label.no_entity;
  j["reliance_js"] = s.label.reliance_js;
  j["answer_probability"] = s.answer_probability;
  j["popularity"] = s.popularity;
  j["category"] = taxonomy::category_name(s.label.category);
  j["split"] = split_name(split);
  return j;
}

LabeledSample sample_from_json(const json& j, Split& split) {
  LabeledSample s;
  s.id = j.at("id").get<int>();
  s.subject_id = j.at("subject_id").get<int>();
  s.relation = worldgen::relation_from_name(j.at("relation").get<std::string>());
  s.query.triple_index = s.id;
  s.query.tokens = j.at("prompt_tokens").get<std::vector<int>>();
  s.query.subject_begin = j.at("subject_span")[0].get<int>();
  s.query.subject_end = j.at("subject_span")[1].get<int>();
  s.query.gold_tokens = j.at("gold_tokens").get<std::vector<int>>();
  s.prediction = j.at("prediction_tokens").get<std::vector<int>>();
  s.label.correct = j.at("correct").get<bool>();
  s.label.no_entity = j.at("no_entity").get<bool>();
  s.label.reliance_js = j.at("reliance_js").get<double>();
  s.answer_probability = j.at("answer_probability").get<double>();
  s.popularity = j.at("popularity").get<double>();
  s.label.category = taxonomy::category_from_name(j.at("category").get<std::string>());
  split = split_from_name(j.at("split").get<std::string>());
  return s;
}

std::vector<model::TokenSequence> to_prompts(const std::vector<LabeledSample>& samples) {
  std::vector<model::TokenSequence> prompts;
  prompts.reserve(samples.size());
  for (const auto& s : samples)
    prompts.push_back({s.query.tokens, s.query.subject_begin, s.query.subject_end});
  return prompts;
}

/// Selected analysis layer, recomputed from the holdout split.
int analysis_layer_for(const model::Params& params, const std::vector<LabeledSample>& holdout) {
  std::vector<analysis::SampleStats> stats = analysis::extract_all_stats(params, holdout);
  return analysis::select_analysis_layer(analysis::subject_norm_curves(stats));
}

json curve_json(const analysis::LayerCurve& c) {
  json j;
  j["group"] = c.group;
  j["n"] = c.count;
  j["values"] = std::vector<double>(c.values.data(), c.values.data() + c.values.size());
  return j;
}

void write_curve_csv(io::CsvWriter& csv, const analysis::LayerCurve& c) {
  for (Eigen::Index l = 0; l < c.values.size(); ++l)
    csv.row({std::to_string(l + 1), c.group, io::fmt(c.values[l]), std::to_string(c.count)});
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  if (n == 0) return 0.0;
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

int holdout_count(int n, double fraction, int holdout_min) {
  const int want = std::max(static_cast<int>(std::llround(fraction * n)), holdout_min);
  const int cap = static_cast<int>(std::floor(0.6 * n));
  return std::clamp(want, 0, cap);
}

std::vector<Split> assign_splits(const std::vector<LabeledSample>& samples, double fraction,
                                 int holdout_min, uint64_t seed) {
  std::vector<Split> splits(samples.size(), Split::Pool);
  for (Category c : {Category::FA, Category::AH, Category::UH}) {
    std::vector<size_t> members;
    for (size_t i = 0; i < samples.size(); ++i)
      if (samples[i].label.category == c) members.push_back(i);
    if (members.empty()) continue;
    Rng rng(seed, "split", static_cast<uint64_t>(c));
    rng.shuffle(members);
    const int hold = holdout_count(static_cast<int>(members.size()), fraction, holdout_min);
    for (int k = 0; k < hold; ++k) splits[members[static_cast<size_t>(k)]] = Split::Holdout;
  }
  return splits;
}

std::vector<taxonomy::LabeledSample> LabeledFile::of_split(Split s) const {
  std::vector<LabeledSample> out;
  for (size_t i = 0; i < samples.size(); ++i)
    if (splits[i] == s) out.push_back(samples[i]);
  return out;
}

LabeledFile read_labeled_dir(const std::string& labeled_dir) {
  const fs::path jsonl = fs::path(labeled_dir) / "labeled.jsonl";
  if (!fs::exists(jsonl))
    throw IoError("missing labeled dataset: " + jsonl.string() +
                  " (run the label command first)");
  io::read_manifest(labeled_dir);

  LabeledFile file;
  std::ifstream in(jsonl);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      Split split;
      file.samples.push_back(sample_from_json(json::parse(line), split));
      file.splits.push_back(split);
    } catch (const json::exception& e) {
      throw IoError(jsonl.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }

  std::ifstream meta_in(fs::path(labeled_dir) / "world_meta.json");
  if (!meta_in) throw IoError("missing world_meta.json in " + labeled_dir);
  json meta = json::parse(meta_in);
  file.threshold = meta.at("threshold").get<double>();
  file.model_hash = meta.at("model_hash").get<std::string>();
  file.world_hash = meta.at("world_hash").get<std::string>();
  file.refusal_templates = meta.at("refusal_templates").get<std::vector<std::vector<int>>>();
  file.vocab = worldgen::load_vocab((fs::path(labeled_dir) / "vocab.json").string());
  return file;
}

std::vector<int> sample_terciles(const std::vector<LabeledSample>& samples) {
  std::map<int, double> subject_pop;
  for (const auto& s : samples) subject_pop[s.subject_id] = s.popularity;
  std::vector<std::pair<double, int>> order;
  order.reserve(subject_pop.size());
  for (const auto& [id, pop] : subject_pop) order.emplace_back(pop, id);
  std::sort(order.begin(), order.end());
  std::map<int, int> tercile;
  const int n = static_cast<int>(order.size());
  for (int i = 0; i < n; ++i) {
    const int t = (i < n / 3) ? 0 : (i < 2 * n / 3 ? 1 : 2);
    tercile[order[static_cast<size_t>(i)].second] = t;
  }
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(tercile.at(s.subject_id));
  return out;
}

void cmd_world(const PipelineConfig& cfg, const std::string& out_dir) {
  Timer timer;
  worldgen::WorldConfig wcfg = cfg.world;
  wcfg.vocab_size = cfg.model.vocab_size;
  worldgen::World world = worldgen::generate_world(wcfg);
  std::vector<int> corpus = worldgen::render_corpus(world);
  std::vector<worldgen::PromptInstance> queries = worldgen::make_queries(world);  // validates spans

  io::AtomicOutDir out(out_dir);
  worldgen::export_triples_jsonl(world, out.file("triples.jsonl").string());
  worldgen::save_vocab(world.vocab, out.file("vocab.json").string());
  worldgen::save_corpus(corpus, out.file("corpus.bin").string());

  const worldgen::CorpusPlan plan = worldgen::plan_corpus(world);
  json summary;
  summary["n_subjects"] = world.config.n_subjects;
  summary["n_triples"] = world.triples.size();
  summary["n_queries"] = queries.size();
  summary["vocab_used"] = world.vocab.size();
  summary["corpus_tokens"] = corpus.size();
  summary["world_hash"] = worldgen::world_hash(world);
  summary["tercile_note"] = "equal-count popularity terciles over subjects";
  {
    std::ofstream f(out.file("world.json"));
    f << summary.dump(2) << "\n";
    if (!f) throw IoError("failed writing world.json");
  }

  io::Manifest manifest;
  manifest.command = "world";
  manifest.config = config::config_to_map(cfg);
  manifest.seed = cfg.seed;
  manifest.wall_ms = timer.ms();
  out.commit(std::move(manifest));
}

void cmd_train(const PipelineConfig& cfg, const std::string& world_dir,
               const std::string& out_dir) {
  Timer timer;
  WorldBundle bundle = load_world_dir(cfg, world_dir, /*with_corpus=*/true);

  model::TrainReport report;
  model::Params params = model::train<float>(cfg.model, bundle.corpus, cfg.train, &report);

  io::AtomicOutDir out(out_dir);
  model::save_checkpoint(params, out.path().string(), cfg.train.seed, "pretraining");
  {
    io::CsvWriter csv(out.file("training_log.csv"));
    csv.row({"step", "loss", "learning_rate"});
    for (const auto& entry : report.log)
      csv.row({std::to_string(entry.step), io::fmt(entry.loss), io::fmt(entry.learning_rate)});
    csv.close();
  }
  for (const auto& w : report.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());

  io::Manifest manifest;
  manifest.command = "train";
  manifest.config = config::config_to_map(cfg);
  manifest.inputs["triples.jsonl"] = bundle.world_dir_hash;
  manifest.inputs["corpus.bin"] = io::input_hash(fs::path(world_dir) / "corpus.bin");
  manifest.seed = cfg.seed;
  manifest.wall_ms = timer.ms();
  out.commit(std::move(manifest));
}

void cmd_label(const PipelineConfig& cfg, const std::string& checkpoint_dir,
               const std::string& world_dir, const std::string& out_dir) {
  Timer timer;
  WorldBundle bundle = load_world_dir(cfg, world_dir, /*with_corpus=*/false);
  model::Params params = model::load_checkpoint(checkpoint_dir);
  require(params.config.vocab_size >= bundle.world.vocab.size(),
          "checkpoint vocabulary smaller than the world vocabulary");

  std::vector<worldgen::PromptInstance> queries = worldgen::make_queries(bundle.world);
  taxonomy::LabeledDataset labeled =
      taxonomy::label_dataset(params, bundle.world, queries, cfg.label);
  std::vector<Split> splits = assign_splits(labeled.samples, cfg.holdout_fraction, cfg.holdout_min,
                                            Rng(cfg.seed, "split-root").next_u64());

  io::AtomicOutDir out(out_dir);
  {
    std::ofstream f(out.file("labeled.jsonl"));
    if (!f) throw IoError("cannot write labeled.jsonl");
    for (size_t i = 0; i < labeled.samples.size(); ++i)
      f << sample_to_json(labeled.samples[i], splits[i], bundle.world.vocab).dump() << "\n";
    if (!f) throw IoError("failed writing labeled.jsonl");
  }
  {
    json counts;
    counts["factual_association"] = labeled.count_fa;
    counts["associated_hallucination"] = labeled.count_ah;
    counts["unassociated_hallucination"] = labeled.count_uh;
    counts["total"] = labeled.samples.size();
    counts["reliance_threshold"] = labeled.threshold;
    std::ofstream f(out.file("label_counts.json"));
    f << counts.dump(2) << "\n";
    if (!f) throw IoError("failed writing label_counts.json");
  }
  {
    json meta;
    meta["threshold"] = labeled.threshold;
    meta["model_hash"] = labeled.model_hash;
    meta["world_hash"] = labeled.world_hash;
    meta["refusal_templates"] = bundle.world.refusal_templates;
    meta["reliance_mode"] =
        cfg.label.mode == taxonomy::RelianceMode::AttentionMask ? "attention" : "masked_prompt";
    std::ofstream f(out.file("world_meta.json"));
    f << meta.dump(2) << "\n";
    if (!f) throw IoError("failed writing world_meta.json");
  }
  worldgen::save_vocab(bundle.world.vocab, out.file("vocab.json").string());

  io::Manifest manifest;
  manifest.command = "label";
  manifest.config = config::config_to_map(cfg);
  manifest.inputs["triples.jsonl"] = bundle.world_dir_hash;
  manifest.inputs["params.bin"] = io::input_hash(fs::path(checkpoint_dir) / "params.bin");
  manifest.seed = cfg.seed;
  manifest.wall_ms = timer.ms();
  out.commit(std::move(manifest));
}

void cmd_trace(const PipelineConfig& cfg, const std::string& checkpoint_dir,
               const std::string& labeled_dir, const std::string& out_dir) {
  Timer timer;
  LabeledFile labeled = read_labeled_dir(labeled_dir);
  model::Params params = model::load_checkpoint(checkpoint_dir);

  const std::vector<interventions::InterventionKind> kinds = {
      interventions::InterventionKind::PatchSubjectStates,
      interventions::InterventionKind::BlockAttention,
      interventions::InterventionKind::PatchLastState};

  std::map<Category, interventions::EffectHeatmap> heatmaps;
  std::map<Category, int> group_sizes;
  for (Category c : {Category::FA, Category::AH, Category::UH}) {
    std::vector<LabeledSample> group;
    for (size_t i = 0; i < labeled.samples.size(); ++i) {
      if (labeled.splits[i] == Split::Holdout && labeled.samples[i].label.category == c)
        group.push_back(labeled.samples[i]);
    }
    if (group.empty())
      throw InvalidInput(std::string("intervention sweep: category ") + taxonomy::category_name(c) +
                         " has no held-out samples");
    if (static_cast<int>(group.size()) > cfg.sweep_per_group) {
      Rng rng(cfg.seed, "sweep-pick", static_cast<uint64_t>(c));
      rng.shuffle(group);
      group.resize(static_cast<size_t>(cfg.sweep_per_group));
    }
    group_sizes[c] = static_cast<int>(group.size());
    heatmaps.emplace(c, interventions::intervention_sweep(params, to_prompts(group), kinds,
                                                          cfg.interventions));
  }

  io::AtomicOutDir out(out_dir);
  {
    io::CsvWriter csv(out.file("heatmap.csv"));
    std::vector<std::string> header = {"kind", "group"};
    for (int l = 1; l <= params.config.n_layers; ++l) header.push_back("layer_" + std::to_string(l));
    csv.row(header);
    for (Category c : {Category::FA, Category::AH, Category::UH}) {
      const auto& hm = heatmaps.at(c);
      for (size_t k = 0; k < hm.kinds.size(); ++k) {
        std::vector<std::string> row = {interventions::kind_name(hm.kinds[k]),
                                        taxonomy::category_name(c)};
        for (double v : hm.cells[k]) row.push_back(io::fmt(v));
        csv.row(row);
      }
    }
    csv.close();
  }
  {
    json sidecar;
    sidecar["corruption"] = cfg.interventions.corruption ==
                                    interventions::CorruptionMode::GaussianEmbeddingNoise
                                ? "gaussian_embedding_noise"
                                : "mean_ablation";
    sidecar["noise_seeds"] = cfg.interventions.noise_seeds;
    sidecar["noise_scale"] = cfg.interventions.noise_scale;
    sidecar["block_window"] = cfg.interventions.block_window;
    sidecar["patch_window"] = cfg.interventions.patch_window;
    sidecar["model_hash"] = labeled.model_hash;
    json counts;
    for (const auto& [cat, n] : group_sizes) counts[taxonomy::category_name(cat)] = n;
    sidecar["group_sizes"] = counts;
    json cells;
    for (Category c : {Category::FA, Category::AH, Category::UH}) {
      const auto& hm = heatmaps.at(c);
      json rows;
      for (size_t k = 0; k < hm.kinds.size(); ++k)
        rows[interventions::kind_name(hm.kinds[k])] = hm.cells[k];
      cells[taxonomy::category_name(c)] = rows;
    }
    sidecar["mean_js"] = cells;
    std::ofstream f(out.file("heatmap.json"));
    f << sidecar.dump(2) << "\n";
    if (!f) throw IoError("failed writing heatmap.json");
  }

  io::Manifest manifest;
  manifest.command = "trace";
  manifest.config = config::config_to_map(cfg);
  manifest.inputs["params.bin"] = io::input_hash(fs::path(checkpoint_dir) / "params.bin");
  manifest.inputs["labeled.jsonl"] = io::input_hash(fs::path(labeled_dir) / "labeled.jsonl");
  manifest.seed = cfg.seed;
  manifest.wall_ms = timer.ms();
  out.commit(std::move(manifest));
}

void cmd_analyze(const PipelineConfig& cfg, const std::string& checkpoint_dir,
                 const std::string& labeled_dir, const std::string& out_dir) {
  Timer timer;
  LabeledFile labeled = read_labeled_dir(labeled_dir);
  model::Params params = model::load_checkpoint(checkpoint_dir);
  std::vector<LabeledSample> holdout = labeled.of_split(Split::Holdout);
  require(!holdout.empty(), "analysis requires held-out samples");

  std::vector<analysis::SampleStats> stats = analysis::extract_all_stats(params, holdout);
  analysis::NormCurves norms = analysis::subject_norm_curves(stats);
  const int layer = analysis::select_analysis_layer(norms);
  analysis::OverlapComparison overlap =
      analysis::overlap_comparison(params, stats, layer, cfg.energy_fraction);
  analysis::PopularityBreakdown breakdown =
      analysis::popularity_breakdown(labeled.samples, sample_terciles(labeled.samples));
  std::vector<analysis::LayerCurve> flow = analysis::attention_flow_curves(stats);
  std::vector<analysis::LayerCurve> cosine = analysis::last_token_similarity_curves(
      stats, cfg.max_cosine_pairs, Rng(cfg.seed, "cosine").next_u64());
  const double max_entropy = std::log2(static_cast<double>(params.config.vocab_size));
  analysis::GroupedHistogram hist =
      analysis::entropy_histogram(stats, max_entropy, cfg.entropy_bins);
  analysis::ProjectionResult projection =
      analysis::projection_export(stats, params.config.n_layers);

  io::AtomicOutDir out(out_dir);
  {
    io::CsvWriter csv(out.file("norm_ratio.csv"));
    csv.row({"layer", "group", "value", "n"});
    for (const auto* c : {&norms.fa, &norms.ah, &norms.uh, &norms.ah_over_fa, &norms.uh_over_fa})
      write_curve_csv(csv, *c);
    csv.close();
  }
  {
    io::CsvWriter csv(out.file("subspace_overlap.csv"));
    csv.row({"group", "mean_overlap", "relative_to_fa", "layer", "energy_fraction", "n"});
    auto n_of = [&](Category c) {
      int n = 0;
      for (const auto& s : stats) n += s.category == c ? 1 : 0;
      return n;
    };
    csv.row({"FA", io::fmt(overlap.mean_fa), io::fmt(1.0), std::to_string(overlap.layer),
             io::fmt(overlap.energy_fraction), std::to_string(n_of(Category::FA))});
    csv.row({"AH", io::fmt(overlap.mean_ah), io::fmt(overlap.ah_over_fa),
             std::to_string(overlap.layer), io::fmt(overlap.energy_fraction),
             std::to_string(n_of(Category::AH))});
    csv.row({"UH", io::fmt(overlap.mean_uh), io::fmt(overlap.uh_over_fa),
             std::to_string(overlap.layer), io::fmt(overlap.energy_fraction),
             std::to_string(n_of(Category::UH))});
    csv.close();
  }
  {
    io::CsvWriter csv(out.file("popularity_breakdown.csv"));
    csv.row({"bin", "fa_share", "ah_share", "uh_share", "n", "empty"});
    const char* bins[3] = {"low", "mid", "high"};
    for (int b = 0; b < 3; ++b) {
      csv.row({bins[b], io::fmt(breakdown.share[b][0]), io::fmt(breakdown.share[b][1]),
               io::fmt(breakdown.share[b][2]), std::to_string(breakdown.count[b]),
               breakdown.empty_bin[b] ? "true" : "false"});
    }
    csv.close();
  }
  {
    io::CsvWriter csv(out.file("attention_flow.csv"));
    csv.row({"layer", "group", "value", "n"});
    for (const auto& c : flow) write_curve_csv(csv, c);
    csv.close();
  }
  {
    io::CsvWriter csv(out.file("last_token_similarity.csv"));
    csv.row({"layer", "group", "value", "n"});
    for (const auto& c : cosine) write_curve_csv(csv, c);
    csv.close();
  }
  {
    io::CsvWriter csv(out.file("entropy_histogram.csv"));
    csv.row({"bin_lo", "bin_hi", "group", "count"});
    for (const auto& [group, counts] : hist.counts) {
      for (size_t b = 0; b < counts.size(); ++b)
        csv.row({io::fmt(hist.edges[static_cast<Eigen::Index>(b)]),
                 io::fmt(hist.edges[static_cast<Eigen::Index>(b + 1)]), group,
                 std::to_string(counts[b])});
    }
    csv.close();
  }
  {
    io::CsvWriter csv(out.file("projection_2d.csv"));
    csv.row({"x", "y", "label"});
    for (Eigen::Index i = 0; i < projection.coords.rows(); ++i)
      csv.row({io::fmt(projection.coords(i, 0)), io::fmt(projection.coords(i, 1)),
               taxonomy::category_name(projection.labels[static_cast<size_t>(i)])});
    csv.close();
  }
  {
    json j;
    j["analysis_layer"] = layer;
    j["norm_ratio"] = {{"AH_over_FA", curve_json(norms.ah_over_fa)},
                       {"UH_over_FA", curve_json(norms.uh_over_fa)}};
    j["overlap"] = {{"layer", overlap.layer},
                    {"energy_fraction", overlap.energy_fraction},
                    {"mean_fa", overlap.mean_fa},
                    {"mean_ah", overlap.mean_ah},
                    {"mean_uh", overlap.mean_uh},
                    {"ah_over_fa", overlap.ah_over_fa},
                    {"uh_over_fa", overlap.uh_over_fa}};
    json flows;
    for (const auto& c : flow) flows[c.group] = curve_json(c);
    j["attention_flow"] = flows;
    json cosines;
    for (const auto& c : cosine) cosines[c.group] = curve_json(c);
    j["last_token_cosine"] = cosines;
    json medians;
    for (Category c : {Category::FA, Category::AH, Category::UH}) {
      std::vector<double> ent;
      for (const auto& s : stats)
        if (s.category == c) ent.push_back(s.output_entropy);
      medians[taxonomy::category_name(c)] = median_of(std::move(ent));
    }
    j["entropy_median"] = medians;
    {
      json bd;
      const char* bins[3] = {"low", "mid", "high"};
      for (int b = 0; b < 3; ++b) {
        bd[bins[b]] = json{{"FA", breakdown.share[b][0]},
                           {"AH", breakdown.share[b][1]},
                           {"UH", breakdown.share[b][2]},
                           {"n", breakdown.count[b]}};
      }
      j["popularity_breakdown"] = bd;
    }
    j["projection"] = {{"layer", projection.layer},
                       {"silhouette_uh_vs_rest", projection.silhouette_uh_vs_rest},
                       {"silhouette_ah_vs_fa", projection.silhouette_ah_vs_fa}};
    j["model_hash"] = labeled.model_hash;
    j["world_hash"] = labeled.world_hash;
    j["holdout_n"] = holdout.size();
    std::ofstream f(out.file("analysis.json"));
    f << j.dump(2) << "\n";
    if (!f) throw IoError("failed writing analysis.json");
  }

  io::Manifest manifest;
  manifest.command = "analyze";
  manifest.config = config::config_to_map(cfg);
  manifest.inputs["params.bin"] = io::input_hash(fs::path(checkpoint_dir) / "params.bin");
  manifest.inputs["labeled.jsonl"] = io::input_hash(fs::path(labeled_dir) / "labeled.jsonl");
  manifest.seed = cfg.seed;
  manifest.wall_ms = timer.ms();
  out.commit(std::move(manifest));
}

void cmd_detect(const PipelineConfig& cfg, const std::string& checkpoint_dir,
                const std::string& labeled_dir, detection::Setting setting,
                const std::string& out_dir) {
  Timer timer;
  LabeledFile labeled = read_labeled_dir(labeled_dir);
  model::Params params = model::load_checkpoint(checkpoint_dir);
  std::vector<LabeledSample> pool = labeled.of_split(Split::Pool);
  std::vector<LabeledSample> holdout = labeled.of_split(Split::Holdout);
  require(!pool.empty(), "detection requires pool samples");
  require(!holdout.empty(), "detection requires held-out samples for layer selection");

  const int layer = analysis_layer_for(params, holdout);
  const std::vector<detection::FeatureKind> kinds = detection::all_feature_kinds();
  std::vector<detection::SampleFeatures> features =
      detection::extract_features_bulk(params, pool, layer, cfg.last_token_postnorm);
  detection::DetectionReport report =
      detection::evaluate_detection(features, setting, kinds, cfg.detect);
  detection::DetectionSettings null_settings = cfg.detect;
  null_settings.shuffle_labels = true;
  detection::DetectionReport null_report =
      detection::evaluate_detection(features, setting, kinds, null_settings);

  io::AtomicOutDir out(out_dir);
  {
    io::CsvWriter csv(out.file("detection_table.csv"));
    csv.row({"method", "setting", "mean_auroc", "std_auroc", "null_mean", "uh_slice_mean",
             "n_seeds", "train_per_class", "test_per_class", "scale"});
    for (size_t k = 0; k < report.results.size(); ++k) {
      const auto& r = report.results[k];
      csv.row({detection::feature_kind_name(r.kind), detection::setting_name(setting),
               io::fmt(r.mean), io::fmt(r.stddev), io::fmt(null_report.results[k].mean),
               r.per_seed_uh_slice.empty() ? "" : io::fmt(r.uh_slice_mean),
               std::to_string(cfg.detect.n_seeds), std::to_string(report.train_per_class),
               std::to_string(report.test_per_class), io::fmt(report.scale_factor)});
    }
    csv.close();
  }
  {
    json j;
    j["setting"] = detection::setting_name(setting);
    j["scale_factor"] = report.scale_factor;
    j["train_per_class"] = report.train_per_class;
    j["test_per_class"] = report.test_per_class;
    j["analysis_layer"] = layer;
    if (setting == detection::Setting::Full)
      j["full_mix_ah_fraction"] = report.full_mix_ah_fraction;
    json methods;
    for (size_t k = 0; k < report.results.size(); ++k) {
      const auto& r = report.results[k];
      json m;
      m["mean"] = r.mean;
      m["std"] = r.stddev;
      m["per_seed"] = r.per_seed_auroc;
      m["null_mean"] = null_report.results[k].mean;
      if (!r.per_seed_uh_slice.empty()) {
        m["uh_slice_mean"] = r.uh_slice_mean;
        m["uh_slice_per_seed"] = r.per_seed_uh_slice;
      }
      methods[detection::feature_kind_name(r.kind)] = m;
    }
    j["methods"] = methods;
    j["model_hash"] = labeled.model_hash;
    std::ofstream f(out.file("detection_report.json"));
    f << j.dump(2) << "\n";
    if (!f) throw IoError("failed writing detection_report.json");
  }

  io::Manifest manifest;
  manifest.command = "detect";
  manifest.config = config::config_to_map(cfg);
  manifest.inputs["params.bin"] = io::input_hash(fs::path(checkpoint_dir) / "params.bin");
  manifest.inputs["labeled.jsonl"] = io::input_hash(fs::path(labeled_dir) / "labeled.jsonl");
  manifest.seed = cfg.seed;
  manifest.wall_ms = timer.ms();
  out.commit(std::move(manifest));
}

void cmd_refuse(const PipelineConfig& cfg, const std::string& checkpoint_dir,
                const std::string& labeled_dir, refusal::RefusalSetting setting,
                const std::string& out_dir) {
  Timer timer;
  LabeledFile labeled = read_labeled_dir(labeled_dir);
  model::Params params = model::load_checkpoint(checkpoint_dir);

  worldgen::World shim;  // refusal needs templates and the period token only
  shim.vocab = labeled.vocab;
  shim.refusal_templates = labeled.refusal_templates;

  refusal::RefusalConfig rcfg = cfg.refusal;
  refusal::RefusalReport report = refusal::run_refusal_experiment(
      params, labeled.of_split(Split::Pool), labeled.of_split(Split::Holdout), shim, setting, rcfg);

  io::AtomicOutDir out(out_dir);
  {
    io::CsvWriter csv(out.file("refusal_report.csv"));
    csv.row({"model", "setting", "category", "refused", "total", "ratio"});
    auto rows = [&](const char* model_name, const std::vector<refusal::CategoryRatio>& ratios) {
      for (const auto& r : ratios)
        csv.row({model_name, refusal::refusal_setting_name(setting),
                 taxonomy::category_name(r.category), std::to_string(r.refused),
                 std::to_string(r.total), io::fmt(r.ratio)});
    };
    rows("untuned", report.untuned);
    rows("tuned", report.tuned);
    csv.close();
  }
  {
    json j;
    j["setting"] = refusal::refusal_setting_name(setting);
    j["scale"] = report.scale;
    j["tuning_loss"] = report.tuning_loss;
    auto block = [&](const std::vector<refusal::CategoryRatio>& ratios) {
      json b;
      for (const auto& r : ratios) {
        b[taxonomy::category_name(r.category)] =
            json{{"refused", r.refused}, {"total", r.total}, {"ratio", r.ratio}};
      }
      return b;
    };
    j["untuned"] = block(report.untuned);
    j["tuned"] = block(report.tuned);
    j["model_hash"] = labeled.model_hash;
    std::ofstream f(out.file("refusal_report.json"));
    f << j.dump(2) << "\n";
    if (!f) throw IoError("failed writing refusal_report.json");
  }

  io::Manifest manifest;
  manifest.command = "refuse";
  manifest.config = config::config_to_map(cfg);
  manifest.inputs["params.bin"] = io::input_hash(fs::path(checkpoint_dir) / "params.bin");
  manifest.inputs["labeled.jsonl"] = io::input_hash(fs::path(labeled_dir) / "labeled.jsonl");
  manifest.seed = cfg.seed;
  manifest.wall_ms = timer.ms();
  out.commit(std::move(manifest));
}

void cmd_repro(const PipelineConfig& cfg, const std::string& out_dir) {
  Timer timer;
  io::AtomicOutDir out(out_dir);
  const std::string root = out.path().string();

  cmd_world(cfg, root + "/world");
  cmd_train(cfg, root + "/world", root + "/train");
  cmd_label(cfg, root + "/train", root + "/world", root + "/label");
  cmd_trace(cfg, root + "/train", root + "/label", root + "/trace");
  cmd_analyze(cfg, root + "/train", root + "/label", root + "/analyze");
  cmd_detect(cfg, root + "/train", root + "/label", detection::Setting::AHOnly,
             root + "/detect_ah_only");
  cmd_detect(cfg, root + "/train", root + "/label", detection::Setting::UHOnly,
             root + "/detect_uh_only");
  cmd_detect(cfg, root + "/train", root + "/label", detection::Setting::Full,
             root + "/detect_full");
  cmd_refuse(cfg, root + "/train", root + "/label", refusal::RefusalSetting::UHOnly,
             root + "/refuse_uh_only");
  cmd_refuse(cfg, root + "/train", root + "/label", refusal::RefusalSetting::AHOnly,
             root + "/refuse_ah_only");

  io::Manifest manifest;
  manifest.command = "repro";
  manifest.config = config::config_to_map(cfg);
  manifest.seed = cfg.seed;
  manifest.wall_ms = timer.ms();
  out.commit(std::move(manifest));
}

}  // namespace knowtrace::pipeline
