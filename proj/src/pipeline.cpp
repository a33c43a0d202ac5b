#include "xsf/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "xsf/error.hpp"

namespace xsf {

namespace {

[[noreturn]] void bad(const std::string& key, const std::string& why) {
  throw Error(ErrorKind::InvalidConfig, "key '" + key + "': " + why);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string part;
  std::istringstream is(s);
  while (std::getline(is, part, sep)) out.push_back(trim(part));
  if (!s.empty() && s.back() == sep) out.push_back("");
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end || v.empty()) bad(key, "expected a number, got '" + v + "'");
  return out;
}

std::size_t parse_count(const std::string& key, const std::string& v, std::size_t lo) {
  if (!v.empty() && v[0] == '-') bad(key, "must be non-negative, got '" + v + "'");
  const auto n = parse_number<std::size_t>(key, v);
  if (n < lo) bad(key, "must be at least " + std::to_string(lo) + ", got " + v);
  return n;
}

template <typename T>
T parse_real(const std::string& key, const std::string& v, T lo, T hi, bool open_lo = false) {
  const T x = parse_number<T>(key, v);
  if (!(open_lo ? x > lo : x >= lo) || !(x <= hi)) {
    std::ostringstream os;
    os << "must be in " << (open_lo ? "(" : "[") << lo << "," << hi << "], got " << v;
    bad(key, os.str());
  }
  return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad(key, "expected true or false, got '" + v + "'");
}

template <typename T>
std::string fmt(T x) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, ptr);
}

template <typename T>
std::string join(const std::vector<T>& xs, const char* sep, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? sep : "") + f(xs[i]);
  return out;
}

std::array<std::size_t, 3> parse_triple(const std::string& key, const std::string& v) {
  const auto parts = split(v, ',');
  if (parts.size() != 3) bad(key, "expected three comma-separated counts, got '" + v + "'");
  return {parse_count(key, parts[0], 1), parse_count(key, parts[1], 1), parse_count(key, parts[2], 1)};
}

struct Key {
  const char* name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

const std::vector<Key>& schema() {
  static const std::vector<Key> keys = [] {
    std::vector<Key> k;
    auto count = [&](const char* name, std::size_t lo, std::function<std::size_t&(RunConfig&)> ref) {
      k.push_back({name, [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); },
                   [ref, name, lo](RunConfig& c, const std::string& v) { ref(c) = parse_count(name, v, lo); }});
    };
    auto real = [&](const char* name, float lo, float hi, bool open_lo, std::function<float&(RunConfig&)> ref) {
      k.push_back({name, [ref](const RunConfig& c) { return fmt(ref(const_cast<RunConfig&>(c))); },
                   [=](RunConfig& c, const std::string& v) { ref(c) = parse_real<float>(name, v, lo, hi, open_lo); }});
    };

    k.push_back({"seed", [](const RunConfig& c) { return std::to_string(c.seed); },
                 [](RunConfig& c, const std::string& v) { c.set_seed(parse_count("seed", v, 0)); }});
    count("identities", 2, [](RunConfig& c) -> std::size_t& { return c.benchmark.identities; });
    count("variations", 2, [](RunConfig& c) -> std::size_t& { return c.benchmark.variations; });
    k.push_back({"input_size", [](const RunConfig& c) { return std::to_string(c.benchmark.render.input_size); },
                 [](RunConfig& c, const std::string& v) {
                   c.benchmark.render.input_size = c.backbone.input_size = parse_count("input_size", v, 8);
                 }});
    count("blobs", 1, [](RunConfig& c) -> std::size_t& { return c.benchmark.render.blobs; });
    real("noise_sigma", 0.0f, 1.0f, false, [](RunConfig& c) -> float& { return c.benchmark.render.noise_sigma; });
    k.push_back({"max_shift", [](const RunConfig& c) { return std::to_string(c.benchmark.render.max_shift); },
                 [](RunConfig& c, const std::string& v) {
                   c.benchmark.render.max_shift = static_cast<int>(parse_count("max_shift", v, 0));
                 }});
    real("min_gain", 0.0f, 10.0f, true, [](RunConfig& c) -> float& { return c.benchmark.render.min_gain; });
    real("max_gain", 0.0f, 10.0f, true, [](RunConfig& c) -> float& { return c.benchmark.render.max_gain; });
    real("tint_jitter", 0.0f, 1.0f, false, [](RunConfig& c) -> float& { return c.benchmark.render.tint_jitter; });
    real("saturation", 0.0f, 1.0f, false, [](RunConfig& c) -> float& { return c.benchmark.render.saturation; });
    real("gamma", 0.0f, 10.0f, true, [](RunConfig& c) -> float& { return c.benchmark.modality.gamma; });
    real("fold_threshold", 0.0f, 1.0f, true, [](RunConfig& c) -> float& { return c.benchmark.modality.fold_threshold; });
    k.push_back({"blur", [](const RunConfig& c) { return std::string(c.benchmark.modality.blur ? "true" : "false"); },
                 [](RunConfig& c, const std::string& v) { c.benchmark.modality.blur = parse_bool("blur", v); }});
    count("n_pretrain", 2, [](RunConfig& c) -> std::size_t& { return c.n_pretrain; });
    count("n_adapt", 2, [](RunConfig& c) -> std::size_t& { return c.n_adapt; });
    count("n_eval", 2, [](RunConfig& c) -> std::size_t& { return c.n_eval; });
    count("neg_per_pos", 0, [](RunConfig& c) -> std::size_t& { return c.neg_per_pos; });
    k.push_back({"fraction", [](const RunConfig& c) { return fmt(c.fraction); },
                 [](RunConfig& c, const std::string& v) { c.fraction = parse_real<double>("fraction", v, 0.0, 1.0, true); }});
    count("eval_folds", 1, [](RunConfig& c) -> std::size_t& { return c.eval_folds; });
    count("stem_channels", 1, [](RunConfig& c) -> std::size_t& { return c.backbone.stem_channels; });
    k.push_back({"stage_channels",
                 [](const RunConfig& c) {
                   const auto& s = c.backbone.stage_channels;
                   return std::to_string(s[0]) + "," + std::to_string(s[1]) + "," + std::to_string(s[2]);
                 },
                 [](RunConfig& c, const std::string& v) { c.backbone.stage_channels = parse_triple("stage_channels", v); }});
    k.push_back({"stage_depths",
                 [](const RunConfig& c) {
                   const auto& s = c.backbone.stage_depths;
                   return std::to_string(s[0]) + "," + std::to_string(s[1]) + "," + std::to_string(s[2]);
                 },
                 [](RunConfig& c, const std::string& v) { c.backbone.stage_depths = parse_triple("stage_depths", v); }});
    count("s2_heads", 1, [](RunConfig& c) -> std::size_t& { return c.backbone.s2_heads; });
    count("embed_dim", 1, [](RunConfig& c) -> std::size_t& { return c.backbone.embed_dim; });
    count("mlp_ratio", 1, [](RunConfig& c) -> std::size_t& { return c.backbone.mlp_ratio; });
    real("pretrain_lr", 0.0f, 1.0f, true, [](RunConfig& c) -> float& { return c.pretrain.lr; });
    count("pretrain_batch", 1, [](RunConfig& c) -> std::size_t& { return c.pretrain.batch; });
    count("pretrain_epochs", 0, [](RunConfig& c) -> std::size_t& { return c.pretrain.epochs; });
    real("logit_scale", 0.0f, 1000.0f, true, [](RunConfig& c) -> float& { return c.pretrain.logit_scale; });
    k.push_back({"layer_set", [](const RunConfig& c) { return c.adapt.layer_set.to_string(); },
                 [](RunConfig& c, const std::string& v) {
                   try {
                     c.adapt.layer_set = LayerSet::parse(v);
                   } catch (const Error& e) {
                     bad("layer_set", e.what());
                   }
                 }});
    real("lambda", 0.0f, 1.0f, false, [](RunConfig& c) -> float& { return c.adapt.lambda; });
    real("margin", -1.0f, 1.0f, false, [](RunConfig& c) -> float& { return c.adapt.margin; });
    real("lr", 0.0f, 1.0f, true, [](RunConfig& c) -> float& { return c.adapt.lr; });
    count("batch", 1, [](RunConfig& c) -> std::size_t& { return c.adapt.batch; });
    count("epochs", 0, [](RunConfig& c) -> std::size_t& { return c.adapt.epochs; });
    k.push_back({"data_dir", [](const RunConfig& c) { return c.data_dir; },
                 [](RunConfig& c, const std::string& v) { c.data_dir = v; }});
    k.push_back({"ablate_sweeps",
                 [](const RunConfig& c) {
                   return join<std::string>(c.ablate_sweeps, ",", [](const std::string& s) { return s; });
                 },
                 [](RunConfig& c, const std::string& v) {
                   c.ablate_sweeps.clear();
                   if (v.empty() || v == "none") return;
                   for (const auto& s : split(v, ',')) {
                     if (s != "layer_set" && s != "lambda" && s != "fraction") {
                       bad("ablate_sweeps", "unknown sweep '" + s + "' (expected layer_set, lambda, fraction)");
                     }
                     c.ablate_sweeps.push_back(s);
                   }
                 }});
    k.push_back({"ablate_layer_sets",
                 [](const RunConfig& c) {
                   return join<LayerSet>(c.ablate_layer_sets, ";", [](const LayerSet& s) { return s.to_string(); });
                 },
                 [](RunConfig& c, const std::string& v) {
                   c.ablate_layer_sets.clear();
                   for (const auto& s : split(v, ';')) {
                     try {
                       c.ablate_layer_sets.push_back(LayerSet::parse(s));
                     } catch (const Error& e) {
                       bad("ablate_layer_sets", e.what());
                     }
                   }
                   if (c.ablate_layer_sets.empty()) bad("ablate_layer_sets", "grid is empty");
                 }});
    k.push_back({"ablate_lambdas",
                 [](const RunConfig& c) { return join<float>(c.ablate_lambdas, ",", [](const float& x) { return fmt(x); }); },
                 [](RunConfig& c, const std::string& v) {
                   c.ablate_lambdas.clear();
                   for (const auto& s : split(v, ',')) c.ablate_lambdas.push_back(parse_real<float>("ablate_lambdas", s, 0.0f, 1.0f));
                   if (c.ablate_lambdas.empty()) bad("ablate_lambdas", "grid is empty");
                 }});
    k.push_back({"ablate_fractions",
                 [](const RunConfig& c) {
                   return join<double>(c.ablate_fractions, ",", [](const double& x) { return fmt(x); });
                 },
                 [](RunConfig& c, const std::string& v) {
                   c.ablate_fractions.clear();
                   for (const auto& s : split(v, ',')) {
                     c.ablate_fractions.push_back(parse_real<double>("ablate_fractions", s, 0.0, 1.0, true));
                   }
                   if (c.ablate_fractions.empty()) bad("ablate_fractions", "grid is empty");
                 }});
    return k;
  }();
  return keys;
}

}  // namespace

RunConfig::RunConfig() { set_seed(seed); }

void RunConfig::set_seed(std::uint64_t s) {
  seed = s;
  benchmark.seed = backbone.seed = pretrain.seed = adapt.seed = s;
}

void RunConfig::validate() const {
  if (n_pretrain + n_adapt + n_eval > benchmark.identities) {
    throw Error(ErrorKind::InvalidConfig, "n_pretrain + n_adapt + n_eval = " +
                                              std::to_string(n_pretrain + n_adapt + n_eval) + " exceeds identities = " +
                                              std::to_string(benchmark.identities));
  }
  if (benchmark.render.min_gain > benchmark.render.max_gain) {
    throw Error(ErrorKind::InvalidConfig, "min_gain exceeds max_gain");
  }
  if (eval_folds > 1 && n_eval / eval_folds < 2) {
    throw Error(ErrorKind::InvalidConfig, "eval_folds = " + std::to_string(eval_folds) +
                                              " leaves fewer than two identities per fold");
  }
  if (benchmark.render.input_size != backbone.input_size) {
    throw Error(ErrorKind::InvalidConfig, "rendered size and backbone input size differ");
  }
  backbone.validate();
  pretrain.validate();
  adapt.validate();
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& k : schema()) out += std::string(k.name) + " = " + k.get(*this) + "\n";
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& k : schema()) out.push_back(k.name);
  return out;
}

RunConfig parse_config_text(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::string> seen;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error(ErrorKind::InvalidConfig, where + "expected 'key = value', got '" + line + "'");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    const auto& keys = schema();
    const auto it = std::find_if(keys.begin(), keys.end(), [&](const Key& k) { return key == k.name; });
    if (it == keys.end()) throw Error(ErrorKind::InvalidConfig, where + "unknown key '" + key + "'");
    if (std::find(seen.begin(), seen.end(), key) != seen.end()) {
      throw Error(ErrorKind::InvalidConfig, where + "key '" + key + "' given twice");
    }
    seen.push_back(key);
    try {
      it->set(cfg, value);
    } catch (const Error& e) {
      throw Error(ErrorKind::InvalidConfig, where + e.what());
    }
  }
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::InvalidConfig, origin + ": " + e.what());
  }
  return cfg;
}

RunConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot read config " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return parse_config_text(os.str(), path.string());
}

IdentitySplit identity_split(const RunConfig& cfg, const IdentityDataset& data) {
  return split_identities(data.identities(), cfg.n_pretrain, cfg.n_adapt, cfg.n_eval, cfg.seed);
}

Model run_pretrain(const RunConfig& cfg, const IdentityDataset& data, PretrainLog* log) {
  const auto split = identity_split(cfg, data);
  return pretrain(build_backbone(cfg.backbone), data, split.pretrain, cfg.pretrain, log);
}

Model run_adapt(const RunConfig& cfg, const Model& pretrained, const IdentityDataset& data,
                std::vector<AdaptLogRow>* log) {
  const auto split = identity_split(cfg, data);
  const auto ids = take_fraction(split.adapt, cfg.fraction);
  const auto pairs = build_pair_set(data, ids, cfg.neg_per_pos, cfg.seed);
  Model student(pretrained);
  partition_parameters(student, cfg.adapt.layer_set);
  const Model teacher = clone_teacher(pretrained);
  return adapt(student, teacher, pairs, data, cfg.adapt, log);
}

EvalProtocol eval_protocol(const IdentityDataset& data, std::span<const std::uint32_t> ids) {
  EvalProtocol p;
  for (auto id : ids) {
    const auto src = data.indices_of(id, Modality::Source);
    const auto tgt = data.indices_of(id, Modality::Target);
    if (src.size() < 2 || tgt.empty()) {
      throw Error(ErrorKind::Protocol, "identity " + std::to_string(id) + " lacks the captures the protocol needs");
    }
    p.cross_gallery.insert(p.cross_gallery.end(), src.begin(), src.end());
    p.cross_probes.insert(p.cross_probes.end(), tgt.begin(), tgt.end());
    const auto half = src.begin() + static_cast<std::ptrdiff_t>(src.size() / 2);
    p.source_gallery.insert(p.source_gallery.end(), src.begin(), half);
    p.source_probes.insert(p.source_probes.end(), half, src.end());
  }
  return p;
}

EvalResult run_eval(const RunConfig& cfg, const Model& model, const IdentityDataset& data) {
  const auto split = identity_split(cfg, data);
  const auto p = eval_protocol(data, split.eval);
  EvalResult r;
  r.cross = score_matrix(model, data, p.cross_gallery, p.cross_probes);
  r.source = score_matrix(model, data, p.source_gallery, p.source_probes);
  r.cross_report = evaluate(r.cross);
  r.source_report = evaluate(r.source);

  std::vector<VerificationReport> cross_folds, source_folds;
  if (cfg.eval_folds < 2) {
    cross_folds.push_back(r.cross_report);
    source_folds.push_back(r.source_report);
  } else {
    for (const auto& fold : split_folds(split.eval, cfg.eval_folds, cfg.seed).folds) {
      const auto fp = eval_protocol(data, fold.eval);
      cross_folds.push_back(evaluate(score_matrix(model, data, fp.cross_gallery, fp.cross_probes)));
      source_folds.push_back(evaluate(score_matrix(model, data, fp.source_gallery, fp.source_probes)));
    }
  }
  r.cross_folds = aggregate_folds(cross_folds);
  r.source_folds = aggregate_folds(source_folds);
  return r;
}

std::string format_metrics(const EvalResult& result) {
  std::string out = "metric\tvalue\tfold_mean\tfold_std\n";
  char buf[256];
  auto emit = [&](const char* prefix, const VerificationReport& full, const FoldReport& folds) {
    const auto values = report_metrics(full);
    for (std::size_t i = 0; i < values.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%s.%s\t%.6f\t%.6f\t%.6f\n", prefix, values[i].first.c_str(), values[i].second,
                    folds.mean[i], folds.stddev[i]);
      out += buf;
    }
  };
  emit("cross", result.cross_report, result.cross_folds);
  emit("source", result.source_report, result.source_folds);
  return out;
}

}  // namespace xsf
