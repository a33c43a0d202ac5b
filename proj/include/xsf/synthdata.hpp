#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "xsf/tensor.hpp"

namespace xsf {

enum class Modality : std::uint8_t { Source = 0, Target = 1 };

const char* to_string(Modality m);

struct DatasetEntry {
  std::uint32_t identity = 0;
  Modality modality = Modality::Source;
  Tensor image;      // [C,H,W], values in [0,1]
  std::string path;  // relative key, e.g. "source/0007/v03"
};

struct IdentityDataset {
  std::vector<DatasetEntry> entries;
  std::string metadata;

  std::vector<std::uint32_t> identities() const;
  std::vector<std::size_t> indices_of(std::uint32_t identity, Modality modality) const;
};

struct RenderConfig {
  std::size_t input_size = 32;
  std::size_t blobs = 6;
  float noise_sigma = 0.02f;
  int max_shift = 2;
  float min_gain = 0.9f;
  float max_gain = 1.1f;
  float tint_jitter = 0.1f;  // per-channel illumination colour, 1 +/- jitter
  float saturation = 0.7f;   // shared palette (1, 1 - s/2, 1 - s)
};

// Procedural face stand-in: identity fixes brightness and a set of signed
// Gaussian blobs; the variation seed fixes gain, illumination tint, shift, and noise.
Tensor render_identity(std::uint64_t identity_seed, std::uint64_t variation_seed, const RenderConfig& cfg);

struct ModalityParams {
  float gamma = 0.45f;
  float fold_threshold = 0.85f;  // intensities above it are mirrored back down
  bool blur = true;
};

// Spectral-style corruption: luminance, v^gamma, upper-band inversion, 3x3 box blur, 3-channel replication.
Tensor modality_transform(const Tensor& image, const ModalityParams& params = {});

struct BenchmarkConfig {
  std::size_t identities = 64;
  std::size_t variations = 8;
  std::uint64_t seed = 7;
  RenderConfig render;
  ModalityParams modality;
};

IdentityDataset generate_benchmark(const BenchmarkConfig& cfg);

struct IdentitySplit {
  std::vector<std::uint32_t> pretrain, adapt, eval;
};

// Seeded shuffle, then contiguous blocks of the requested sizes.
IdentitySplit split_identities(std::vector<std::uint32_t> ids, std::size_t n_pretrain, std::size_t n_adapt,
                               std::size_t n_eval, std::uint64_t seed);

struct PairSample {
  std::size_t source_index = 0;
  std::size_t target_index = 0;
  int y = 0;
};

// Every cross-modal genuine pair, plus for each source image neg_per_pos impostor
// targets per genuine pair drawn without replacement (capped at the pool size).
std::vector<PairSample> build_pair_set(const IdentityDataset& dataset, std::span<const std::uint32_t> ids,
                                       std::size_t neg_per_pos, std::uint64_t seed);

struct Fold {
  std::vector<std::uint32_t> train, eval;
};

struct FoldSplit {
  std::vector<Fold> folds;
};

FoldSplit split_folds(std::span<const std::uint32_t> ids, std::size_t k, std::uint64_t seed);

// First max(2, round(fraction * n)) identities, clamped to n.
std::vector<std::uint32_t> take_fraction(std::span<const std::uint32_t> ids, double fraction);

// Layout: <root>/{source,target}/<identity>/<sample>.xst, one [C,H,W] tensor per file.
IdentityDataset load_dataset(const std::filesystem::path& root);
void save_dataset(const IdentityDataset& dataset, const std::filesystem::path& root);

// UTF-8 lines: source_path<TAB>target_path<TAB>label
void export_pairs(const IdentityDataset& dataset, std::span<const PairSample> pairs, const std::filesystem::path& path);

// Stacks entry images into [N,C,H,W].
Tensor stack_images(const IdentityDataset& dataset, std::span<const std::size_t> indices);

std::vector<std::size_t> entries_for(const IdentityDataset& dataset, std::span<const std::uint32_t> ids, Modality modality);

}  // namespace xsf
