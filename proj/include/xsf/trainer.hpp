#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "xsf/backbone.hpp"
#include "xsf/synthdata.hpp"

namespace xsf {

struct AdamState {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  std::uint64_t step = 0;
  struct Moments {
    std::vector<float> m, v;
  };
  std::map<std::string, Moments> moments;  // trainable parameters only
};

// Bias-corrected Adam update of every non-FROZEN parameter; FROZEN entries are skipped.
void adam_step(std::span<Parameter* const> params, AdamState& state, float lr);

struct PretrainConfig {
  float lr = 1e-3f;
  std::size_t batch = 64;
  std::size_t epochs = 30;
  std::uint64_t seed = 7;
  float logit_scale = 16.0f;

  void validate() const;
};

struct PretrainLog {
  std::vector<double> epoch_loss;  // mean cross-entropy per epoch
};

// Cosine-softmax identity classification on source images; the classifier
// head is temporary. Returns a new model with every parameter FROZEN.
Model pretrain(const Model& model, const IdentityDataset& dataset, std::span<const std::uint32_t> ids,
               const PretrainConfig& cfg, PretrainLog* log = nullptr);

struct AdaptConfig {
  LayerSet layer_set{Unit::LN, Unit::ST, Unit::S0};
  float lambda = 0.75f;
  float margin = 0.0f;
  float lr = 1e-4f;
  std::size_t batch = 64;
  std::size_t epochs = 20;
  std::uint64_t seed = 7;

  void validate() const;
};

struct AdaptLogRow {
  std::size_t epoch = 0, batch = 0;
  double contrastive = 0.0, distillation = 0.0, total = 0.0;
};

// Minimizes (1-lambda) L_C + lambda L_SDL over pair batches. The student must
// already be partitioned with cfg.layer_set; only its non-FROZEN parameters move.
Model adapt(const Model& student, const Model& teacher, std::span<const PairSample> pairs,
            const IdentityDataset& dataset, const AdaptConfig& cfg, std::vector<AdaptLogRow>* log = nullptr);

// epoch<TAB>batch<TAB>L_C<TAB>L_SDL<TAB>L_total per line.
void write_training_log(std::span<const AdaptLogRow> rows, const std::filesystem::path& path);
std::vector<AdaptLogRow> read_training_log(const std::filesystem::path& path);

// Embeds dataset entries in fixed-size chunks without recording a graph.
Tensor embed_entries(const Model& model, const IdentityDataset& dataset, std::span<const std::size_t> indices,
                     std::size_t chunk = 128);

}  // namespace xsf
