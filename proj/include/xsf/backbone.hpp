#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "xsf/container.hpp"
#include "xsf/tensor.hpp"

namespace xsf {

// Desk-scale hybrid conv/transformer: stem -> S0 -> S1 -> S2 (attention) -> head.
struct BackboneConfig {
  std::size_t input_channels = 3;
  std::size_t input_size = 32;
  std::size_t stem_channels = 16;
  std::array<std::size_t, 3> stage_channels{16, 32, 64};
  std::array<std::size_t, 3> stage_depths{1, 1, 1};
  std::size_t s2_heads = 2;
  std::size_t embed_dim = 64;
  std::size_t mlp_ratio = 2;
  std::uint64_t seed = 7;

  void validate() const;
  // key=value lines, fixed key order.
  std::string to_text() const;
  static BackboneConfig from_text(const std::string& text);

  bool operator==(const BackboneConfig&) const = default;
};

// Adaptable units: LayerNorm affine everywhere, stem, and the three stages.
enum class Unit : std::uint8_t { LN = 0, ST = 1, S0 = 2, S1 = 3, S2 = 4 };

class LayerSet {
 public:
  LayerSet() = default;
  LayerSet(std::initializer_list<Unit> units);

  // Accepts "LN,ST,S0" in any order; "" and "none" give the empty set.
  static LayerSet parse(const std::string& text);
  // Canonical order LN,ST,S0,S1,S2; the empty set prints as "none".
  std::string to_string() const;

  bool contains(Unit u) const { return (bits_ >> static_cast<unsigned>(u)) & 1u; }
  void insert(Unit u) { bits_ |= 1u << static_cast<unsigned>(u); }
  bool empty() const { return bits_ == 0; }
  bool is_subset_of(const LayerSet& other) const { return (bits_ & ~other.bits_) == 0; }
  std::uint8_t bits() const { return bits_; }
  static LayerSet from_bits(std::uint8_t bits);

  bool operator==(const LayerSet&) const = default;

 private:
  std::uint8_t bits_ = 0;
};

// The 16 rows of the adapted-layer ablation, in published order.
std::vector<LayerSet> ablation_layer_sets();

struct Parameter {
  std::string name;
  Tensor value;
  Partition partition = Partition::Frozen;
};

// True when some dotted segment is "ln" or "ln<digits>" and the leaf is gamma/beta.
bool is_layernorm_name(const std::string& name);
// Unit owning a parameter by its top-level prefix; nullopt for final/head.
std::optional<Unit> unit_of(const std::string& name);

class Model {
 public:
  Model() = default;
  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const BackboneConfig& config() const { return config_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  const Parameter& param(const std::string& name) const;
  Parameter& param(const std::string& name);
  std::size_t parameter_count() const;

  // Names of every affine parameter created by a LayerNorm module.
  const std::vector<std::string>& layernorm_parameters() const { return ln_names_; }

  const std::optional<LayerSet>& layer_set() const { return layer_set_; }
  std::vector<Parameter*> trainable();
  void zero_grad();

 private:
  friend Model build_backbone(const BackboneConfig& config);
  friend void partition_parameters(Model& model, const LayerSet& layer_set);
  friend Model clone_teacher(const Model& model);
  friend Model load_checkpoint(const std::filesystem::path& path);
  friend Model model_from_container(const Container& c);

  void add_param(std::string name, Tensor value, bool layernorm);
  void reindex();

  BackboneConfig config_;
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
  std::vector<std::string> ln_names_;
  std::optional<LayerSet> layer_set_;
};

// All parameters FROZEN, requires_grad=false, no layer set.
Model build_backbone(const BackboneConfig& config);

// batch [N,C,H,W] -> raw embeddings [N,embed_dim].
Tensor forward_embed(const Model& model, const Tensor& batch);

void partition_parameters(Model& model, const LayerSet& layer_set);

Model clone_teacher(const Model& model);

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

Container model_to_container(const Model& model);
Model model_from_container(const Container& c);

}  // namespace xsf
