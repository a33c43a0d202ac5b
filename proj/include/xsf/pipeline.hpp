#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "xsf/backbone.hpp"
#include "xsf/eval.hpp"
#include "xsf/synthdata.hpp"
#include "xsf/trainer.hpp"

namespace xsf {

// Everything a run needs, as one flat key=value schema.
struct RunConfig {
  std::uint64_t seed = 7;
  BenchmarkConfig benchmark;
  std::size_t n_pretrain = 48, n_adapt = 8, n_eval = 8;
  std::size_t neg_per_pos = 3;
  double fraction = 1.0;      // share of adaptation identities used
  std::size_t eval_folds = 2;  // 1 disables fold aggregation
  BackboneConfig backbone;
  PretrainConfig pretrain;
  AdaptConfig adapt;
  std::string data_dir;  // empty: <out>/data

  std::vector<std::string> ablate_sweeps{"layer_set", "lambda", "fraction"};
  std::vector<LayerSet> ablate_layer_sets = ablation_layer_sets();
  std::vector<float> ablate_lambdas{0.0f, 0.25f, 0.5f, 0.75f, 1.0f};
  std::vector<double> ablate_fractions{1.0, 0.5, 0.2, 0.1, 0.05};

  RunConfig();
  // Propagates the run seed into every seeded component.
  void set_seed(std::uint64_t s);
  // Cross-field checks; per-key range checks happen while parsing.
  void validate() const;
  // Every key in schema order; parse_config_text(to_text()) reproduces *this.
  std::string to_text() const;
};

// `key = value` lines, `#` comments. Unknown keys and bad values are
// invalid-config errors that name the key and line.
RunConfig parse_config_text(const std::string& text, const std::string& origin = "<config>");
RunConfig parse_config(const std::filesystem::path& path);
std::vector<std::string> config_keys();

IdentitySplit identity_split(const RunConfig& cfg, const IdentityDataset& data);

Model run_pretrain(const RunConfig& cfg, const IdentityDataset& data, PretrainLog* log = nullptr);

// Partitions a copy of `pretrained` per cfg.adapt.layer_set, clones the teacher
// from `pretrained`, and adapts on pairs from the (fraction of) adaptation ids.
Model run_adapt(const RunConfig& cfg, const Model& pretrained, const IdentityDataset& data,
                std::vector<AdaptLogRow>* log = nullptr);

// Gallery/probe protocols over evaluation identities.
struct EvalProtocol {
  std::vector<std::size_t> cross_gallery, cross_probes;    // source vs target
  std::vector<std::size_t> source_gallery, source_probes;  // first vs second half of source captures
};
EvalProtocol eval_protocol(const IdentityDataset& data, std::span<const std::uint32_t> ids);

struct EvalResult {
  ScoreSet cross, source;
  VerificationReport cross_report, source_report;
  FoldReport cross_folds, source_folds;
};
EvalResult run_eval(const RunConfig& cfg, const Model& model, const IdentityDataset& data);

// metric<TAB>value<TAB>fold_mean<TAB>fold_std, names prefixed "cross." or "source.".
std::string format_metrics(const EvalResult& result);

}  // namespace xsf
