#include "xsf/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <cctype>
#include <cstdio>
#include <map>
#include <optional>
#include <set>

#include "xsf/container.hpp"
#include "xsf/error.hpp"
#include "xsf/random.hpp"

namespace xsf {

namespace fs = std::filesystem;

const char* to_string(Modality m) { return m == Modality::Source ? "source" : "target"; }

std::vector<std::uint32_t> IdentityDataset::identities() const {
  std::set<std::uint32_t> ids;
  for (const auto& e : entries) ids.insert(e.identity);
  return {ids.begin(), ids.end()};
}

std::vector<std::size_t> IdentityDataset::indices_of(std::uint32_t identity, Modality modality) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].identity == identity && entries[i].modality == modality) out.push_back(i);
  return out;
}

namespace {

// Streams used with counter_uniform/counter_normal.
enum : std::uint64_t { kStreamGeometry = 1, kStreamNuisance = 2, kStreamNoise = 3 };

struct Blob {
  double cx, cy, sigma, amplitude;
};

}  // namespace

Tensor render_identity(std::uint64_t identity_seed, std::uint64_t variation_seed, const RenderConfig& cfg) {
  const std::size_t S = cfg.input_size;
  const double side = static_cast<double>(S);
  std::uint64_t k = 0;
  auto geo = [&] { return counter_uniform(identity_seed, kStreamGeometry, k++); };
  const double base = 0.35 + 0.3 * geo();
  std::vector<Blob> blobs(cfg.blobs);
  for (auto& b : blobs) {
    b.cx = side * (0.15 + 0.7 * geo());
    b.cy = side * (0.15 + 0.7 * geo());
    b.sigma = side * (0.1 + 0.12 * geo());
    b.amplitude = (geo() < 0.5 ? -1.0 : 1.0) * (0.25 + 0.3 * geo());
  }
  const double sat = cfg.saturation;
  const double palette[3] = {1.0, 1.0 - sat / 2.0, 1.0 - sat};

  std::uint64_t v = 0;
  auto nuis = [&] { return counter_uniform(variation_seed, kStreamNuisance, v++); };
  const double gain = cfg.min_gain + (cfg.max_gain - cfg.min_gain) * nuis();
  double tint[3];
  for (double& t : tint) t = 1.0 + cfg.tint_jitter * (2.0 * nuis() - 1.0);
  const int span = 2 * cfg.max_shift + 1;
  const int dx = static_cast<int>(nuis() * span) - cfg.max_shift;
  const int dy = static_cast<int>(nuis() * span) - cfg.max_shift;

  std::vector<float> img(3 * S * S);
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < S; ++x) {
      double acc = base;
      for (const auto& b : blobs) {
        const double px = static_cast<double>(x) - dx - b.cx, py = static_cast<double>(y) - dy - b.cy;
        acc += b.amplitude * std::exp(-0.5 * (px * px + py * py) / (b.sigma * b.sigma));
      }
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t i = (c * S + y) * S + x;
        const double noisy =
            gain * tint[c] * palette[c] * acc + cfg.noise_sigma * counter_normal(variation_seed, kStreamNoise, i);
        img[i] = static_cast<float>(std::clamp(noisy, 0.0, 1.0));
      }
    }
  return Tensor({3, S, S}, std::move(img));
}

Tensor modality_transform(const Tensor& image, const ModalityParams& params) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw Error(ErrorKind::InvalidShape, "modality_transform: expected [3,H,W], got " + shape_str(image.dims()));
  }
  const std::size_t H = image.dim(1), W = image.dim(2), HW = H * W;
  const auto px = image.data();
  std::vector<float> lum(HW);
  for (std::size_t i = 0; i < HW; ++i) {
    double v = 0.299 * px[i] + 0.587 * px[HW + i] + 0.114 * px[2 * HW + i];
    v = std::pow(std::clamp(v, 0.0, 1.0), static_cast<double>(params.gamma));
    if (v > params.fold_threshold) v = 2.0 * params.fold_threshold - v;
    lum[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  std::vector<float> out(3 * HW);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      float v = lum[y * W + x];
      if (params.blur) {
        // 3x3 mean with edge clamping.
        float acc = 0.0f;
        for (int oy = -1; oy <= 1; ++oy)
          for (int ox = -1; ox <= 1; ++ox) {
            const long yy = std::clamp<long>(static_cast<long>(y) + oy, 0, static_cast<long>(H) - 1);
            const long xx = std::clamp<long>(static_cast<long>(x) + ox, 0, static_cast<long>(W) - 1);
            acc += lum[yy * W + xx];
          }
        v = acc / 9.0f;
      }
      for (std::size_t c = 0; c < 3; ++c) out[c * HW + y * W + x] = v;
    }
  return Tensor({3, H, W}, std::move(out));
}

namespace {

std::string entry_path(Modality m, std::uint32_t id, std::size_t variation) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s/%04u/v%02zu", to_string(m), id, variation);
  return buf;
}

}  // namespace

IdentityDataset generate_benchmark(const BenchmarkConfig& cfg) {
  if (cfg.identities == 0 || cfg.variations == 0) throw Error(ErrorKind::InvalidConfig, "benchmark needs identities and variations");
  IdentityDataset ds;
  ds.metadata = "synthetic seed=" + std::to_string(cfg.seed) + " identities=" + std::to_string(cfg.identities) +
                " variations=" + std::to_string(cfg.variations);
  for (Modality m : {Modality::Source, Modality::Target}) {
    for (std::uint32_t id = 0; id < cfg.identities; ++id) {
      const std::uint64_t identity_seed = counter_hash(cfg.seed, 0x1d, id);
      for (std::size_t v = 0; v < cfg.variations; ++v) {
        // Target captures use their own nuisance draws.
        const std::uint64_t variation_seed = counter_hash(identity_seed, static_cast<std::uint64_t>(m) + 1, v);
        Tensor img = render_identity(identity_seed, variation_seed, cfg.render);
        if (m == Modality::Target) img = modality_transform(img, cfg.modality);
        ds.entries.push_back({id, m, std::move(img), entry_path(m, id, v)});
      }
    }
  }
  return ds;
}

IdentitySplit split_identities(std::vector<std::uint32_t> ids, std::size_t n_pretrain, std::size_t n_adapt,
                               std::size_t n_eval, std::uint64_t seed) {
  if (n_pretrain + n_adapt + n_eval > ids.size()) {
    throw Error(ErrorKind::Protocol, "split needs " + std::to_string(n_pretrain + n_adapt + n_eval) +
                                         " identities, dataset has " + std::to_string(ids.size()));
  }
  std::sort(ids.begin(), ids.end());
  std::mt19937_64 rng(seed);
  fisher_yates(ids, rng);
  IdentitySplit s;
  auto take = [&](std::size_t from, std::size_t n) {
    std::vector<std::uint32_t> out(ids.begin() + from, ids.begin() + from + n);
    std::sort(out.begin(), out.end());
    return out;
  };
  s.pretrain = take(0, n_pretrain);
  s.adapt = take(n_pretrain, n_adapt);
  s.eval = take(n_pretrain + n_adapt, n_eval);
  return s;
}

std::vector<PairSample> build_pair_set(const IdentityDataset& dataset, std::span<const std::uint32_t> ids,
                                       std::size_t neg_per_pos, std::uint64_t seed) {
  if (ids.empty()) throw Error(ErrorKind::Protocol, "build_pair_set: empty identity set");
  std::vector<std::uint32_t> sorted(ids.begin(), ids.end());
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  std::map<std::uint32_t, std::vector<std::size_t>> sources, targets;
  for (auto id : sorted) {
    sources[id] = dataset.indices_of(id, Modality::Source);
    targets[id] = dataset.indices_of(id, Modality::Target);
    if (sources[id].empty() || targets[id].empty()) {
      throw Error(ErrorKind::Protocol, "identity " + std::to_string(id) + " has no " +
                                           (sources[id].empty() ? "source" : "target") + " images");
    }
  }
  std::mt19937_64 rng(seed);
  std::vector<PairSample> pairs;
  for (auto id : sorted) {
    std::vector<std::size_t> pool;
    for (auto other : sorted)
      if (other != id) pool.insert(pool.end(), targets[other].begin(), targets[other].end());
    for (auto s : sources[id]) {
      for (auto t : targets[id]) pairs.push_back({s, t, 1});
      const std::size_t want = std::min(neg_per_pos * targets[id].size(), pool.size());
      // Partial Fisher-Yates: the first `want` slots become a uniform sample without replacement.
      for (std::size_t i = 0; i < want; ++i) {
        std::swap(pool[i], pool[i + uniform_index(rng, pool.size() - i)]);
        pairs.push_back({s, pool[i], 0});
      }
    }
  }
  return pairs;
}

FoldSplit split_folds(std::span<const std::uint32_t> ids, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw Error(ErrorKind::Protocol, "split_folds: k must be at least 2, got " + std::to_string(k));
  if (k > ids.size()) {
    throw Error(ErrorKind::Protocol, "split_folds: k=" + std::to_string(k) + " exceeds " + std::to_string(ids.size()) + " identities");
  }
  std::vector<std::uint32_t> order(ids.begin(), ids.end());
  std::mt19937_64 rng(seed);
  fisher_yates(order, rng);
  FoldSplit split;
  const std::size_t base = order.size() / k, extra = order.size() % k;
  std::size_t start = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t len = base + (i < extra ? 1 : 0);
    Fold f;
    for (std::size_t j = 0; j < order.size(); ++j) (j >= start && j < start + len ? f.eval : f.train).push_back(order[j]);
    std::sort(f.train.begin(), f.train.end());
    std::sort(f.eval.begin(), f.eval.end());
    split.folds.push_back(std::move(f));
    start += len;
  }
  return split;
}

std::vector<std::uint32_t> take_fraction(std::span<const std::uint32_t> ids, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw Error(ErrorKind::InvalidConfig, "training fraction must be in (0,1]");
  std::size_t n = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(ids.size())));
  n = std::min(std::max<std::size_t>(n, 2), ids.size());
  return {ids.begin(), ids.begin() + n};
}

IdentityDataset load_dataset(const fs::path& root) {
  if (!fs::is_directory(root / "source")) {
    throw Error(ErrorKind::InvalidDataset, "missing source directory under " + root.string());
  }
  std::vector<std::string> rel_paths;
  for (const char* modality : {"source", "target"}) {
    const fs::path dir = root / modality;
    if (!fs::exists(dir)) continue;
    for (const auto& id_dir : fs::directory_iterator(dir)) {
      if (!id_dir.is_directory()) continue;
      for (const auto& f : fs::directory_iterator(id_dir.path())) {
        if (f.is_regular_file() && f.path().extension() == ".xst") {
          rel_paths.push_back(fs::relative(f.path(), root).generic_string());
        }
      }
    }
  }
  std::sort(rel_paths.begin(), rel_paths.end());
  IdentityDataset ds;
  ds.metadata = "loaded from " + root.string();
  std::optional<Shape> dims;
  std::set<std::uint32_t> source_ids;
  for (const auto& rel : rel_paths) {
    const fs::path full = root / rel;
    const auto first = rel.find('/'), second = rel.find('/', first + 1);
    const std::string modality = rel.substr(0, first), id_text = rel.substr(first + 1, second - first - 1);
    if (id_text.empty() || id_text.size() > 9 || !std::all_of(id_text.begin(), id_text.end(), [](unsigned char ch) { return std::isdigit(ch) != 0; })) {
      throw Error(ErrorKind::InvalidDataset, "identity directory '" + id_text + "' is not numeric: " + full.string());
    }
    Container c;
    try {
      c = read_container(full);
    } catch (const Error& e) {
      throw Error(ErrorKind::CorruptData, full.string() + ": " + e.what());
    }
    if (c.entries.size() != 1 || c.entries[0].value.rank() != 3) {
      throw Error(ErrorKind::CorruptData, full.string() + ": expected exactly one [C,H,W] tensor");
    }
    Tensor img = c.entries[0].value;
    for (float v : img.data()) {
      if (!(v >= 0.0f && v <= 1.0f)) throw Error(ErrorKind::CorruptData, full.string() + ": pixel outside [0,1]");
    }
    if (dims && *dims != img.dims()) {
      throw Error(ErrorKind::InvalidDataset, full.string() + ": dims " + shape_str(img.dims()) + " differ from " + shape_str(*dims));
    }
    dims = img.dims();
    const auto id = static_cast<std::uint32_t>(std::stoul(id_text));
    const Modality m = modality == "source" ? Modality::Source : Modality::Target;
    if (m == Modality::Source) source_ids.insert(id);
    std::string key = rel.substr(0, rel.size() - 4);
    ds.entries.push_back({id, m, std::move(img), std::move(key)});
  }
  for (const auto& e : ds.entries) {
    if (!source_ids.count(e.identity)) {
      throw Error(ErrorKind::InvalidDataset, "identity " + std::to_string(e.identity) + " has target images but no source images");
    }
  }
  return ds;
}

void save_dataset(const IdentityDataset& dataset, const fs::path& root) {
  std::error_code ec;
  fs::create_directories(root / "source", ec);
  fs::create_directories(root / "target", ec);
  for (const auto& e : dataset.entries) {
    const fs::path file = root / (e.path + ".xst");
    fs::create_directories(file.parent_path(), ec);
    if (ec) throw Error(ErrorKind::Io, "cannot create " + file.parent_path().string());
    Container c;
    c.header = "identity=" + std::to_string(e.identity) + "\nmodality=" + to_string(e.modality) + "\n";
    c.entries.push_back({e.path, Partition::Frozen, e.image});
    write_container(c, file);
  }
}

void export_pairs(const IdentityDataset& dataset, std::span<const PairSample> pairs, const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  for (const auto& p : pairs) {
    out << dataset.entries.at(p.source_index).path << ".xst\t" << dataset.entries.at(p.target_index).path << ".xst\t"
        << p.y << '\n';
  }
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

Tensor stack_images(const IdentityDataset& dataset, std::span<const std::size_t> indices) {
  if (indices.empty()) throw Error(ErrorKind::InvalidCall, "stack_images: no indices");
  const Shape& d = dataset.entries.at(indices[0]).image.dims();
  const std::size_t n = shape_numel(d);
  std::vector<float> out(indices.size() * n);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& img = dataset.entries.at(indices[i]).image;
    if (img.dims() != d) throw Error(ErrorKind::InvalidShape, "stack_images: mixed image dims");
    std::copy(img.data().begin(), img.data().end(), out.begin() + i * n);
  }
  Shape dims{indices.size()};
  dims.insert(dims.end(), d.begin(), d.end());
  return Tensor(std::move(dims), std::move(out));
}

std::vector<std::size_t> entries_for(const IdentityDataset& dataset, std::span<const std::uint32_t> ids, Modality modality) {
  std::set<std::uint32_t> wanted(ids.begin(), ids.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < dataset.entries.size(); ++i) {
    const auto& e = dataset.entries[i];
    if (e.modality == modality && wanted.count(e.identity)) out.push_back(i);
  }
  return out;
}

}  // namespace xsf
