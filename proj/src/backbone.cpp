#include "xsf/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "xsf/error.hpp"
#include "xsf/ops.hpp"
#include "xsf/random.hpp"

namespace xsf {

namespace {

constexpr float kLayerNormEps = 1e-5f;
constexpr const char* kUnitNames[] = {"LN", "ST", "S0", "S1", "S2"};

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string join3(const std::array<std::size_t, 3>& v) {
  return std::to_string(v[0]) + "," + std::to_string(v[1]) + "," + std::to_string(v[2]);
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != value.size() || value.empty() || value[0] == '-') {
    throw Error(ErrorKind::InvalidConfig, "key '" + key + "': expected a non-negative integer, got '" + value + "'");
  }
  return static_cast<std::size_t>(v);
}

std::array<std::size_t, 3> parse_triple(const std::string& key, const std::string& value) {
  std::array<std::size_t, 3> out{};
  std::stringstream ss(value);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i >= 3) break;
    out[i++] = parse_size(key, item);
  }
  if (i != 3 || std::count(value.begin(), value.end(), ',') != 2) {
    throw Error(ErrorKind::InvalidConfig, "key '" + key + "': expected three comma-separated integers, got '" + value + "'");
  }
  return out;
}

}  // namespace

void BackboneConfig::validate() const {
  auto bad = [](const std::string& what) { throw Error(ErrorKind::InvalidConfig, what); };
  if (input_channels == 0) bad("input_channels must be positive");
  if (input_size < 8 || input_size % 8 != 0) bad("input_size must be a positive multiple of 8, got " + std::to_string(input_size));
  if (stem_channels == 0) bad("stem_channels must be positive");
  for (std::size_t i = 0; i < 3; ++i) {
    if (stage_channels[i] == 0) bad("stage_channels entries must be positive");
    if (stage_depths[i] == 0) bad("stage_depths entries must be positive");
  }
  if (s2_heads == 0 || stage_channels[2] % s2_heads != 0) {
    bad("s2 channels " + std::to_string(stage_channels[2]) + " not divisible by s2_heads " + std::to_string(s2_heads));
  }
  if (embed_dim == 0) bad("embed_dim must be positive");
  if (mlp_ratio == 0) bad("mlp_ratio must be positive");
}

std::string BackboneConfig::to_text() const {
  std::ostringstream os;
  os << "input_channels=" << input_channels << '\n'
     << "input_size=" << input_size << '\n'
     << "stem_channels=" << stem_channels << '\n'
     << "stage_channels=" << join3(stage_channels) << '\n'
     << "stage_depths=" << join3(stage_depths) << '\n'
     << "s2_heads=" << s2_heads << '\n'
     << "embed_dim=" << embed_dim << '\n'
     << "mlp_ratio=" << mlp_ratio << '\n'
     << "seed=" << seed << '\n';
  return os.str();
}

BackboneConfig BackboneConfig::from_text(const std::string& text) {
  BackboneConfig c;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error(ErrorKind::InvalidConfig, "malformed config line '" + line + "'");
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "input_channels") c.input_channels = parse_size(key, value);
    else if (key == "input_size") c.input_size = parse_size(key, value);
    else if (key == "stem_channels") c.stem_channels = parse_size(key, value);
    else if (key == "stage_channels") c.stage_channels = parse_triple(key, value);
    else if (key == "stage_depths") c.stage_depths = parse_triple(key, value);
    else if (key == "s2_heads") c.s2_heads = parse_size(key, value);
    else if (key == "embed_dim") c.embed_dim = parse_size(key, value);
    else if (key == "mlp_ratio") c.mlp_ratio = parse_size(key, value);
    else if (key == "seed") c.seed = parse_size(key, value);
    else throw Error(ErrorKind::InvalidConfig, "unknown backbone key '" + key + "'");
  }
  c.validate();
  return c;
}

LayerSet::LayerSet(std::initializer_list<Unit> units) {
  for (auto u : units) insert(u);
}

LayerSet LayerSet::from_bits(std::uint8_t bits) {
  LayerSet s;
  s.bits_ = bits & 0x1f;
  return s;
}

LayerSet LayerSet::parse(const std::string& text) {
  LayerSet s;
  if (text.empty() || text == "none") return s;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    bool found = false;
    for (unsigned i = 0; i < 5; ++i) {
      if (item == kUnitNames[i]) {
        if (s.contains(static_cast<Unit>(i))) {
          throw Error(ErrorKind::InvalidConfig, "layer set '" + text + "' repeats " + item);
        }
        s.insert(static_cast<Unit>(i));
        found = true;
      }
    }
    if (!found) throw Error(ErrorKind::InvalidConfig, "layer set '" + text + "': unknown unit '" + item + "'");
  }
  return s;
}

std::string LayerSet::to_string() const {
  std::string out;
  for (unsigned i = 0; i < 5; ++i) {
    if (!contains(static_cast<Unit>(i))) continue;
    if (!out.empty()) out += ',';
    out += kUnitNames[i];
  }
  return out.empty() ? "none" : out;
}

std::vector<LayerSet> ablation_layer_sets() {
  std::vector<LayerSet> out;
  for (const char* row : {"LN", "ST", "LN,ST", "LN,ST,S0", "LN,ST,S0,S1", "LN,ST,S0,S1,S2", "S0", "S1", "S2", "LN,S0",
                          "LN,S1", "LN,S2", "S1,S2", "S0,S1,S2", "ST,S0,S1,S2", "LN,S0,S1,S2"}) {
    out.push_back(LayerSet::parse(row));
  }
  return out;
}

bool is_layernorm_name(const std::string& name) {
  std::vector<std::string> segs;
  std::stringstream ss(name);
  std::string seg;
  while (std::getline(ss, seg, '.')) segs.push_back(seg);
  if (segs.size() < 2 || (segs.back() != "gamma" && segs.back() != "beta")) return false;
  for (std::size_t i = 0; i + 1 < segs.size(); ++i) {
    const auto& s = segs[i];
    if (s.size() >= 2 && s.compare(0, 2, "ln") == 0 &&
        std::all_of(s.begin() + 2, s.end(), [](char c) { return c >= '0' && c <= '9'; })) {
      return true;
    }
  }
  return false;
}

std::optional<Unit> unit_of(const std::string& name) {
  const auto prefix = name.substr(0, name.find('.'));
  if (prefix == "stem") return Unit::ST;
  if (prefix == "s0") return Unit::S0;
  if (prefix == "s1") return Unit::S1;
  if (prefix == "s2") return Unit::S2;
  return std::nullopt;
}

Model::Model(const Model& other)
    : config_(other.config_), index_(other.index_), ln_names_(other.ln_names_), layer_set_(other.layer_set_) {
  params_.reserve(other.params_.size());
  for (const auto& p : other.params_) params_.push_back({p.name, p.value.clone(), p.partition});
}

Model& Model::operator=(const Model& other) {
  if (this != &other) {
    Model copy(other);
    *this = std::move(copy);
  }
  return *this;
}

const Parameter& Model::param(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error(ErrorKind::InvalidCall, "no parameter named '" + name + "'");
  return params_[it->second];
}

Parameter& Model::param(const std::string& name) {
  return const_cast<Parameter&>(static_cast<const Model&>(*this).param(name));
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

std::vector<Parameter*> Model::trainable() {
  std::vector<Parameter*> out;
  for (auto& p : params_)
    if (p.partition != Partition::Frozen) out.push_back(&p);
  return out;
}

void Model::zero_grad() {
  for (auto& p : params_) p.value.clear_grad();
}

void Model::add_param(std::string name, Tensor value, bool layernorm) {
  if (index_.count(name)) throw Error(ErrorKind::InvalidConfig, "duplicate parameter name '" + name + "'");
  index_[name] = params_.size();
  if (layernorm) ln_names_.push_back(name);
  params_.push_back({std::move(name), std::move(value), Partition::Frozen});
}

void Model::reindex() {
  index_.clear();
  for (std::size_t i = 0; i < params_.size(); ++i) index_[params_[i].name] = i;
}

namespace {

constexpr double kStemInitGain = 0.1;

class Builder {
 public:
  Builder(std::uint64_t seed, std::function<void(std::string, Tensor, bool)> add) : seed_(seed), add_(std::move(add)) {}

  // Kaiming-uniform over fan-in, scaled: U(-g*sqrt(6/fan_in), g*sqrt(6/fan_in)).
  void weight(const std::string& name, Shape dims, std::size_t fan_in, double gain = 1.0) {
    const double bound = gain * std::sqrt(6.0 / static_cast<double>(fan_in));
    const auto stream = fnv1a(name);
    std::vector<float> v(shape_numel(dims));
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = static_cast<float>((2.0 * counter_uniform(seed_, stream, i) - 1.0) * bound);
    }
    add_(name, Tensor(std::move(dims), std::move(v)), false);
  }
  // Small-normal init for learned embeddings (std 0.02).
  void embedding(const std::string& name, Shape dims) {
    const auto stream = fnv1a(name);
    std::vector<float> v(shape_numel(dims));
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(0.02 * counter_normal(seed_, stream, i));
    add_(name, Tensor(std::move(dims), std::move(v)), false);
  }
  void zeros(const std::string& name, std::size_t n) { add_(name, Tensor::zeros({n}), false); }
  void layer_norm(const std::string& prefix, std::size_t d) {
    add_(prefix + ".gamma", Tensor::full({d}, 1.0f), true);
    add_(prefix + ".beta", Tensor::zeros({d}), true);
  }
  void conv(const std::string& prefix, std::size_t cout, std::size_t cin_per_group, std::size_t k, double gain = 1.0) {
    weight(prefix + ".weight", {cout, cin_per_group, k, k}, cin_per_group * k * k, gain);
    zeros(prefix + ".bias", cout);
  }
  void fc(const std::string& prefix, std::size_t dout, std::size_t din) {
    weight(prefix + ".weight", {dout, din}, din);
    zeros(prefix + ".bias", dout);
  }

 private:
  std::uint64_t seed_;
  std::function<void(std::string, Tensor, bool)> add_;
};

std::string block_name(std::size_t stage, std::size_t block) {
  return "s" + std::to_string(stage) + ".block" + std::to_string(block);
}

}  // namespace

Model build_backbone(const BackboneConfig& config) {
  config.validate();
  Model m;
  m.config_ = config;
  Builder b(config.seed, [&m](std::string n, Tensor t, bool ln) { m.add_param(std::move(n), std::move(t), ln); });
  const auto& ch = config.stage_channels;
  const std::size_t r = config.mlp_ratio;

  // The stem feeds a LayerNorm, so its scale only sets how far each Adam step
  // moves it. A small init lets the stem keep learning at fine-tuning rates.
  b.conv("stem.conv", config.stem_channels, config.input_channels, 3, kStemInitGain);
  b.layer_norm("stem.ln", config.stem_channels);

  if (config.stem_channels != ch[0]) {
    b.layer_norm("s0.proj.ln", config.stem_channels);
    b.fc("s0.proj.fc", ch[0], config.stem_channels);
  }
  for (std::size_t stage = 0; stage < 2; ++stage) {
    if (stage == 1) {
      b.layer_norm("s1.down.ln", ch[0]);
      b.conv("s1.down.conv", ch[1], ch[0], 2);
    }
    const std::size_t c = ch[stage];
    for (std::size_t i = 0; i < config.stage_depths[stage]; ++i) {
      const auto p = block_name(stage, i);
      b.conv(p + ".dwconv", c, 1, 3);
      b.layer_norm(p + ".ln", c);
      b.fc(p + ".pw1", r * c, c);
      b.fc(p + ".pw2", c, r * c);
    }
  }
  b.layer_norm("s2.down.ln", ch[1]);
  b.conv("s2.down.conv", ch[2], ch[1], 2);
  const std::size_t d = ch[2];
  const std::size_t tokens = (config.input_size / 8) * (config.input_size / 8);
  b.embedding("s2.pos", {tokens, d});
  for (std::size_t i = 0; i < config.stage_depths[2]; ++i) {
    const auto p = block_name(2, i);
    b.layer_norm(p + ".ln1", d);
    for (const char* w : {".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo"}) b.weight(p + w, {d, d}, d);
    b.layer_norm(p + ".ln2", d);
    b.fc(p + ".mlp.fc1", r * d, d);
    b.fc(p + ".mlp.fc2", d, r * d);
  }
  b.layer_norm("final.ln", d);
  b.fc("head.fc", config.embed_dim, d);
  return m;
}

Tensor forward_embed(const Model& model, const Tensor& batch) {
  const auto& cfg = model.config();
  if (batch.rank() != 4 || batch.dim(1) != cfg.input_channels || batch.dim(2) != cfg.input_size ||
      batch.dim(3) != cfg.input_size) {
    throw Error(ErrorKind::InvalidShape, "forward_embed: batch " + shape_str(batch.dims()) + " does not match [N," +
                                             std::to_string(cfg.input_channels) + "," + std::to_string(cfg.input_size) +
                                             "," + std::to_string(cfg.input_size) + "]");
  }
  auto P = [&](const std::string& name) -> const Tensor& { return model.param(name).value; };
  auto ln = [&](const Tensor& x, const std::string& prefix) {
    return layer_norm(x, P(prefix + ".gamma"), P(prefix + ".beta"), kLayerNormEps);
  };
  auto fc = [&](const Tensor& x, const std::string& prefix) { return linear(x, P(prefix + ".weight"), P(prefix + ".bias")); };
  const auto& ch = cfg.stage_channels;

  // Channels-last between convolutions so LayerNorm and pointwise layers act per position.
  Tensor x = conv2d(batch, P("stem.conv.weight"), P("stem.conv.bias"), {2, 1, 1});
  x = ln(nchw_to_nhwc(x), "stem.ln");
  if (cfg.stem_channels != ch[0]) x = fc(ln(x, "s0.proj.ln"), "s0.proj.fc");

  for (std::size_t stage = 0; stage < 2; ++stage) {
    if (stage == 1) {
      x = nhwc_to_nchw(ln(x, "s1.down.ln"));
      x = nchw_to_nhwc(conv2d(x, P("s1.down.conv.weight"), P("s1.down.conv.bias"), {2, 0, 1}));
    }
    const std::size_t c = ch[stage];
    for (std::size_t i = 0; i < cfg.stage_depths[stage]; ++i) {
      const auto p = block_name(stage, i);
      Tensor h = conv2d(nhwc_to_nchw(x), P(p + ".dwconv.weight"), P(p + ".dwconv.bias"), {1, 1, c});
      h = ln(nchw_to_nhwc(h), p + ".ln");
      h = fc(gelu(fc(h, p + ".pw1")), p + ".pw2");
      x = add(x, h);
    }
  }

  x = nhwc_to_nchw(ln(x, "s2.down.ln"));
  x = conv2d(x, P("s2.down.conv.weight"), P("s2.down.conv.bias"), {2, 0, 1});
  const std::size_t n = x.dim(0), side = x.dim(2), d = ch[2];
  x = add_leading(reshape(nchw_to_nhwc(x), {n, side * side, d}), P("s2.pos"));
  for (std::size_t i = 0; i < cfg.stage_depths[2]; ++i) {
    const auto p = block_name(2, i);
    x = add(x, multihead_attention(ln(x, p + ".ln1"), P(p + ".attn.wq"), P(p + ".attn.wk"), P(p + ".attn.wv"),
                                   P(p + ".attn.wo"), cfg.s2_heads));
    x = add(x, fc(gelu(fc(ln(x, p + ".ln2"), p + ".mlp.fc1")), p + ".mlp.fc2"));
  }
  x = mean_tokens(ln(x, "final.ln"));
  return fc(x, "head.fc");
}

void partition_parameters(Model& model, const LayerSet& layer_set) {
  for (auto& p : model.params_) {
    Partition tag = Partition::Frozen;
    if (is_layernorm_name(p.name)) {
      if (layer_set.contains(Unit::LN)) tag = Partition::LN;
    } else if (auto u = unit_of(p.name); u && layer_set.contains(*u)) {
      tag = Partition::Adapted;
    }
    p.partition = tag;
    p.value.set_requires_grad(tag != Partition::Frozen);
  }
  model.layer_set_ = layer_set;
}

Model clone_teacher(const Model& model) {
  Model teacher(model);
  for (auto& p : teacher.params_) {
    p.partition = Partition::Frozen;
    p.value.set_requires_grad(false);
  }
  teacher.layer_set_ = LayerSet{};
  return teacher;
}

Container model_to_container(const Model& model) {
  Container c;
  c.header = model.config().to_text();
  if (model.layer_set()) c.header += "partition=" + model.layer_set()->to_string() + "\n";
  for (const auto& p : model.parameters()) c.entries.push_back({p.name, p.partition, p.value});
  return c;
}

Model model_from_container(const Container& c) {
  auto corrupt = [](const std::string& msg) { throw Error(ErrorKind::CorruptCheckpoint, msg); };
  std::string config_text;
  std::optional<LayerSet> layer_set;
  std::istringstream is(c.header);
  std::string line;
  while (std::getline(is, line)) {
    if (line.rfind("partition=", 0) == 0) {
      layer_set = LayerSet::parse(line.substr(10));
    } else {
      config_text += line + "\n";
    }
  }
  BackboneConfig config;
  try {
    config = BackboneConfig::from_text(config_text);
  } catch (const Error& e) {
    corrupt(std::string("invalid config header: ") + e.what());
  }
  Model m = build_backbone(config);
  if (c.entries.size() != m.params_.size()) {
    corrupt("expected " + std::to_string(m.params_.size()) + " parameters, found " + std::to_string(c.entries.size()));
  }
  for (std::size_t i = 0; i < c.entries.size(); ++i) {
    const auto& e = c.entries[i];
    auto& p = m.params_[i];
    if (e.name != p.name) corrupt("parameter " + std::to_string(i) + " is '" + e.name + "', expected '" + p.name + "'");
    if (e.value.dims() != p.value.dims()) {
      corrupt("parameter '" + e.name + "' has dims " + shape_str(e.value.dims()) + ", expected " + shape_str(p.value.dims()));
    }
    p.value = Tensor(e.value.dims(), std::vector<float>(e.value.data().begin(), e.value.data().end()),
                     e.tag != Partition::Frozen);
    p.partition = e.tag;
  }
  m.layer_set_ = layer_set;
  return m;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  write_container(model_to_container(model), path);
}

Model load_checkpoint(const std::filesystem::path& path) { return model_from_container(read_container(path)); }

}  // namespace xsf
