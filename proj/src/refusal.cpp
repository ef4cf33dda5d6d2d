// SPDX-License-Identifier: Apache-2.0
#include "knowtrace/refusal.hpp"

#include "knowtrace/rng.hpp"
#include "knowtrace/threading.hpp"

#include <algorithm>
#include <map>
#include <set>

namespace knowtrace::refusal {

using model::TokenSequence;
using model::TuningPair;
using taxonomy::LabeledSample;
using worldgen::Vocab;

const char* refusal_setting_name(RefusalSetting s) {
  return s == RefusalSetting::UHOnly ? "UH_Only" : "AH_Only";
}

RefusalSetting refusal_setting_from_name(const std::string& name) {
  if (name == "UH_Only" || name == "uh_only" || name == "uh") return RefusalSetting::UHOnly;
  if (name == "AH_Only" || name == "ah_only" || name == "ah") return RefusalSetting::AHOnly;
  throw InvalidInput("unknown refusal setting: '" + name + "'");
}

RefusalDataset build_refusal_dataset(const std::vector<LabeledSample>& tuning_pool,
                                     const worldgen::World& world, RefusalSetting setting,
                                     const RefusalConfig& config) {
  require(!world.refusal_templates.empty(), "world has no refusal templates");
  const Category hal_cat = setting == RefusalSetting::UHOnly ? Category::UH : Category::AH;

  std::vector<const LabeledSample*> fa, hal;
  for (const auto& s : tuning_pool) {
    if (s.label.category == Category::FA) fa.push_back(&s);
    if (s.label.category == hal_cat) hal.push_back(&s);
  }
  require(!fa.empty() && !hal.empty(), "refusal tuning needs FA and hallucination samples");

  const size_t avail = std::min(fa.size(), hal.size());
  const size_t take = std::min(avail, static_cast<size_t>(config.pairs_per_class));
  RefusalDataset out;
  out.scale = static_cast<double>(take) / static_cast<double>(config.pairs_per_class);

  Rng rng(config.seed, "refusal-dataset");
  rng.shuffle(fa);
  rng.shuffle(hal);

  const int period = world.vocab.id(".");
  for (size_t i = 0; i < take; ++i) {
    // FA half keeps the gold answer
    TuningPair keep;
    keep.prompt = fa[i]->query.tokens;
    keep.target = fa[i]->query.gold_tokens;
    keep.target.push_back(period);
    out.pairs.push_back(std::move(keep));
    out.used_ids.push_back(fa[i]->id);

    // hallucination half maps to a refusal template, round-robin
    TuningPair refuse;
    refuse.prompt = hal[i]->query.tokens;
    refuse.target = world.refusal_templates[i % world.refusal_templates.size()];
    out.pairs.push_back(std::move(refuse));
    out.used_ids.push_back(hal[i]->id);
  }
  return out;
}

bool is_refusal(const std::vector<int>& generated,
                const std::vector<std::vector<int>>& templates) {
  for (const auto& tpl : templates) {
    if (generated.size() < tpl.size()) continue;
    if (std::equal(tpl.begin(), tpl.end(), generated.begin())) return true;
  }
  return false;
}

namespace {

std::vector<CategoryRatio> measure_ratios(const model::Params& params,
                                          const std::vector<const LabeledSample*>& eval_samples,
                                          const worldgen::World& world, int max_new) {
  std::vector<int> refused(eval_samples.size(), 0);
  parallel_for(eval_samples.size(), [&](size_t i) {
    const auto& q = eval_samples[i]->query;
    TokenSequence prompt{q.tokens, q.subject_begin, q.subject_end};
    std::vector<int> generated = model::greedy_decode(params, prompt, max_new, Vocab::kEot);
    refused[i] = is_refusal(generated, world.refusal_templates) ? 1 : 0;
  });
  std::vector<CategoryRatio> rows;
  for (Category c : {Category::FA, Category::AH, Category::UH}) {
    CategoryRatio row;
    row.category = c;
    for (size_t i = 0; i < eval_samples.size(); ++i) {
      if (eval_samples[i]->label.category != c) continue;
      row.total += 1;
      row.refused += refused[i];
    }
    row.ratio = row.total > 0 ? static_cast<double>(row.refused) / row.total : 0.0;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

RefusalReport run_refusal_experiment(const model::Params& params,
                                     const std::vector<LabeledSample>& tuning_pool,
                                     const std::vector<LabeledSample>& eval_pool,
                                     const worldgen::World& world, RefusalSetting setting,
                                     const RefusalConfig& config) {
  RefusalDataset dataset = build_refusal_dataset(tuning_pool, world, setting, config);

  // eval prompts must be disjoint from tuning prompts
  std::set<int> tuned_ids(dataset.used_ids.begin(), dataset.used_ids.end());
  std::vector<const LabeledSample*> eval_samples;
  std::map<Category, int> per_cat;
  Rng rng(config.seed, "refusal-eval");
  std::vector<const LabeledSample*> shuffled;
  for (const auto& s : eval_pool) shuffled.push_back(&s);
  rng.shuffle(shuffled);
  for (const auto* s : shuffled) {
    require(!tuned_ids.count(s->id), "refusal eval sample overlaps the tuning set");
    if (per_cat[s->label.category] >= config.eval_per_class) continue;
    per_cat[s->label.category] += 1;
    eval_samples.push_back(s);
  }
  require(!eval_samples.empty(), "refusal evaluation set is empty");

  const int max_new = 6;  // templates are three tokens; leave slack
  RefusalReport report;
  report.setting = setting;
  report.scale = dataset.scale;
  report.untuned = measure_ratios(params, eval_samples, world, max_new);

  model::TrainReport train_report;
  model::FineTuneSchedule schedule = config.schedule;
  schedule.seed = config.seed;
  model::Params tuned =
      model::fine_tune(params, dataset.pairs, schedule, Vocab::kEot, &train_report);
  report.tuning_loss = train_report.final_loss;
  report.tuned = measure_ratios(tuned, eval_samples, world, max_new);
  return report;
}

}  // namespace knowtrace::refusal
