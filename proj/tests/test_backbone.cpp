#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <regex>
#include <set>

#include "support/partition_oracle.hpp"
#include "support/reference_ops.hpp"
#include "support/temp_dir.hpp"
#include "xsf/backbone.hpp"
#include "xsf/error.hpp"
#include "xsf/ops.hpp"

using namespace xsf;
using xsf::testing::expected_tag;
using xsf::testing::random_floats;
using xsf::testing::TempDir;

namespace {

Tensor random_batch(std::size_t n, std::uint64_t seed, std::size_t size = 32) {
  auto v = random_floats(n * 3 * size * size, seed, 0.0f, 1.0f);
  return Tensor({n, 3, size, size}, std::move(v));
}

std::string bytes_of(const Model& m) {
  std::string out;
  for (const auto& p : m.parameters()) {
    out += p.name;
    out.append(reinterpret_cast<const char*>(p.value.data().data()), p.value.numel() * sizeof(float));
  }
  return out;
}

}  // namespace

TEST(Backbone, OutputShape) {
  const Model m = build_backbone(BackboneConfig{});
  EXPECT_EQ(forward_embed(m, random_batch(2, 1)).dims(), (Shape{2, 64}));
}

TEST(Backbone, DeterministicInit) {
  EXPECT_EQ(bytes_of(build_backbone(BackboneConfig{})), bytes_of(build_backbone(BackboneConfig{})));
  BackboneConfig other;
  other.seed = 8;
  EXPECT_NE(bytes_of(build_backbone(BackboneConfig{})), bytes_of(build_backbone(other)));
}

// Weights are Kaiming-uniform over fan-in, except the stem which starts at a
// tenth of that range. Biases and LayerNorm shifts start at zero.
TEST(Backbone, InitRanges) {
  const Model m = build_backbone(BackboneConfig{});
  const double stem_bound = 0.1 * std::sqrt(6.0 / 27.0);
  const double pw1_bound = std::sqrt(6.0 / 16.0);
  auto max_abs = [&](const std::string& name) {
    float r = 0.0f;
    for (float v : m.param(name).value.data()) r = std::max(r, std::abs(v));
    return static_cast<double>(r);
  };
  EXPECT_LE(max_abs("stem.conv.weight"), stem_bound);
  EXPECT_GT(max_abs("stem.conv.weight"), 0.8 * stem_bound);
  EXPECT_LE(max_abs("s0.block0.pw1.weight"), pw1_bound);
  EXPECT_GT(max_abs("s0.block0.pw1.weight"), 0.8 * pw1_bound);
  EXPECT_EQ(max_abs("stem.conv.bias"), 0.0);
  EXPECT_EQ(max_abs("final.ln.beta"), 0.0);
}

TEST(Backbone, ParameterCountByHand) {
  BackboneConfig c;
  c.stem_channels = 8;
  c.stage_channels = {8, 16, 32};
  c.stage_depths = {1, 1, 1};
  c.embed_dim = 64;
  c.mlp_ratio = 2;
  const std::size_t stem = (8 * 3 * 9 + 8) + 2 * 8;
  const std::size_t s0 = (8 * 9 + 8) + 2 * 8 + (16 * 8 + 16) + (8 * 16 + 8);
  const std::size_t s1_down = 2 * 8 + (16 * 8 * 4 + 16);
  const std::size_t s1 = (16 * 9 + 16) + 2 * 16 + (32 * 16 + 32) + (16 * 32 + 16);
  const std::size_t s2_down = 2 * 16 + (32 * 16 * 4 + 32);
  const std::size_t s2_pos = 16 * 32;
  const std::size_t s2 = 2 * 32 + 4 * 32 * 32 + 2 * 32 + (64 * 32 + 64) + (32 * 64 + 32);
  const std::size_t tail = 2 * 32 + (64 * 32 + 64);
  EXPECT_EQ(build_backbone(c).parameter_count(), stem + s0 + s1_down + s1 + s2_down + s2_pos + s2 + tail);
  EXPECT_EQ(build_backbone(c).parameter_count(), 15640u);
}

TEST(Backbone, ParameterCountIsPureFunctionOfConfig) {
  BackboneConfig c;
  c.stage_depths = {2, 1, 2};
  c.seed = 99;
  BackboneConfig d = c;
  d.seed = 1;
  EXPECT_EQ(build_backbone(c).parameter_count(), build_backbone(d).parameter_count());
}

TEST(Backbone, NamesAreUnique) {
  BackboneConfig c;
  c.stage_depths = {2, 2, 2};
  const Model m = build_backbone(c);
  std::set<std::string> names;
  for (const auto& p : m.parameters()) EXPECT_TRUE(names.insert(p.name).second) << p.name;
}

TEST(Backbone, InvalidConfig) {
  auto expect_config_error = [](BackboneConfig c) {
    try {
      build_backbone(c);
      ADD_FAILURE() << "accepted " << c.to_text();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::InvalidConfig);
    }
  };
  BackboneConfig c;
  c.s2_heads = 5;
  expect_config_error(c);
  c = {};
  c.embed_dim = 0;
  expect_config_error(c);
  c = {};
  c.input_size = 20;
  expect_config_error(c);
}

TEST(Backbone, ShapeMismatch) {
  const Model m = build_backbone(BackboneConfig{});
  try {
    forward_embed(m, random_batch(1, 2, 16));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InvalidShape);
  }
}

TEST(Backbone, DuplicateImagesGiveIdenticalRows) {
  const Model m = build_backbone(BackboneConfig{});
  auto img = random_floats(3 * 32 * 32, 5, 0.0f, 1.0f);
  std::vector<float> both(img);
  both.insert(both.end(), img.begin(), img.end());
  const Tensor e = forward_embed(m, Tensor({2, 3, 32, 32}, both));
  EXPECT_EQ(std::memcmp(e.data().data(), e.data().data() + 64, 64 * sizeof(float)), 0);
  const Tensor r0 = reshape(index_rows(e, std::vector<std::size_t>{0}), {64});
  EXPECT_NEAR(cosine_similarity(r0, r0).item(), 1.0f, 1e-6);
}

TEST(Backbone, BatchCompositionDoesNotChangeRows) {
  const Model m = build_backbone(BackboneConfig{});
  const Tensor batch = random_batch(3, 6);
  const Tensor e = forward_embed(m, batch);
  const std::vector<float> single(batch.data().begin() + 3 * 32 * 32, batch.data().begin() + 2 * 3 * 32 * 32);
  const Tensor one = forward_embed(m, Tensor({1, 3, 32, 32}, single));
  EXPECT_EQ(std::memcmp(one.data().data(), e.data().data() + 64, 64 * sizeof(float)), 0);
}

TEST(Backbone, FrozenWeightIsConnected) {
  Model m = build_backbone(BackboneConfig{});
  partition_parameters(m, LayerSet{Unit::LN});
  const Tensor x = random_batch(1, 7);
  const Tensor before = forward_embed(m, x);
  for (const char* name : {"stem.conv.weight", "s1.block0.pw1.weight", "s2.block0.attn.wv", "head.fc.weight"}) {
    Model copy(m);
    ASSERT_EQ(copy.param(name).partition, Partition::Frozen);
    copy.param(name).value.mutable_data()[0] += 0.5f;
    const Tensor after = forward_embed(copy, x);
    EXPECT_NE(std::memcmp(before.data().data(), after.data().data(), 64 * sizeof(float)), 0) << name;
  }
}

TEST(LayerSet, ParseAndPrint) {
  EXPECT_EQ(LayerSet::parse("S0,LN,ST").to_string(), "LN,ST,S0");
  EXPECT_EQ(LayerSet::parse("LN,S0"), (LayerSet{Unit::LN, Unit::S0}));
  EXPECT_TRUE(LayerSet::parse("").empty());
  EXPECT_TRUE(LayerSet::parse("none").empty());
  EXPECT_EQ(LayerSet{}.to_string(), "none");
  EXPECT_THROW(LayerSet::parse("LN,XX"), Error);
  EXPECT_THROW(LayerSet::parse("LN,LN"), Error);
}

TEST(LayerSet, AblationRows) {
  const auto rows = ablation_layer_sets();
  ASSERT_EQ(rows.size(), 16u);
  std::set<std::uint8_t> distinct;
  for (const auto& r : rows) distinct.insert(r.bits());
  EXPECT_EQ(distinct.size(), 16u);
  EXPECT_EQ(rows.front().to_string(), "LN");
  EXPECT_NE(std::find(rows.begin(), rows.end(), LayerSet{Unit::LN, Unit::ST, Unit::S0}), rows.end());
  EXPECT_NE(std::find(rows.begin(), rows.end(), LayerSet{Unit::LN, Unit::S0}), rows.end());
}

TEST(Partition, EmptySetFreezesEverything) {
  Model m = build_backbone(BackboneConfig{});
  partition_parameters(m, LayerSet{});
  EXPECT_TRUE(m.trainable().empty());
  for (const auto& p : m.parameters()) {
    EXPECT_EQ(p.partition, Partition::Frozen);
    EXPECT_FALSE(p.value.requires_grad());
  }
}

TEST(Partition, LnOnlyIsExactlyTheLayerNormAffines) {
  Model m = build_backbone(BackboneConfig{});
  partition_parameters(m, LayerSet{Unit::LN});
  std::set<std::string> trainable;
  for (auto* p : m.trainable()) trainable.insert(p->name);
  const std::set<std::string> ln(m.layernorm_parameters().begin(), m.layernorm_parameters().end());
  EXPECT_EQ(trainable, ln);
}

TEST(Partition, DefaultSetCountByHand) {
  BackboneConfig c;
  c.stem_channels = 8;
  c.stage_channels = {8, 16, 32};
  Model m = build_backbone(c);
  partition_parameters(m, LayerSet{Unit::LN, Unit::ST, Unit::S0});
  // LN affines: stem.ln, s0.block0.ln, s1.down.ln, s1.block0.ln, s2.down.ln, ln1, ln2, final.ln.
  const std::size_t ln = 2 * (8 + 8 + 8 + 16 + 16 + 32 + 32 + 32);
  const std::size_t stem = 8 * 3 * 9 + 8;
  const std::size_t s0 = (8 * 9 + 8) + (16 * 8 + 16) + (8 * 16 + 8);
  std::size_t count = 0;
  for (auto* p : m.trainable()) count += p->value.numel();
  EXPECT_EQ(count, ln + stem + s0);
}

class PartitionAllSubsets : public ::testing::TestWithParam<int> {};

TEST_P(PartitionAllSubsets, MatchesNamePrefixOracle) {
  const LayerSet set = LayerSet::from_bits(static_cast<std::uint8_t>(GetParam()));
  BackboneConfig c;
  c.stage_depths = {2, 1, 2};
  Model m = build_backbone(c);
  partition_parameters(m, set);
  ASSERT_TRUE(m.layer_set().has_value());
  EXPECT_EQ(*m.layer_set(), set);
  std::set<std::string> tagged[3];
  for (const auto& p : m.parameters()) {
    EXPECT_EQ(p.partition, expected_tag(p.name, set)) << p.name << " in " << set.to_string();
    EXPECT_EQ(p.value.requires_grad(), p.partition != Partition::Frozen) << p.name;
    tagged[static_cast<int>(p.partition)].insert(p.name);
  }
  std::size_t total = 0;
  for (const auto& t : tagged) total += t.size();
  EXPECT_EQ(total, m.parameters().size());  // disjoint and exhaustive
  // Monotone: adding any unit never shrinks the trainable set.
  for (int u = 0; u < 5; ++u) {
    LayerSet bigger = set;
    bigger.insert(static_cast<Unit>(u));
    Model m2 = build_backbone(c);
    partition_parameters(m2, bigger);
    for (const auto& p : m.parameters()) {
      if (p.partition != Partition::Frozen) EXPECT_NE(m2.param(p.name).partition, Partition::Frozen) << p.name;
    }
  }
}

INSTANTIATE_TEST_SUITE_P(AllLayerSets, PartitionAllSubsets, ::testing::Range(0, 32));

TEST(Partition, LayerNormNameSoundness) {
  BackboneConfig c;
  c.stem_channels = 4;  // forces the s0 projection
  c.stage_depths = {2, 2, 2};
  const Model m = build_backbone(c);
  std::set<std::string> by_name;
  for (const auto& p : m.parameters())
    if (is_layernorm_name(p.name)) by_name.insert(p.name);
  const std::set<std::string> created(m.layernorm_parameters().begin(), m.layernorm_parameters().end());
  EXPECT_EQ(by_name, created);
  EXPECT_TRUE(created.count("s0.proj.ln.gamma"));
  EXPECT_FALSE(is_layernorm_name("s1.block0.pw1.weight"));
  EXPECT_FALSE(is_layernorm_name("s2.block0.ln1.weight"));
  EXPECT_TRUE(is_layernorm_name("s2.block0.ln2.beta"));
}

TEST(Partition, OperatorSequenceIndependentOfLayerSet) {
  auto ops_for = [](const LayerSet& set) {
    Model m = build_backbone(BackboneConfig{});
    partition_parameters(m, set);
    Tensor x = random_batch(1, 9);
    x.set_requires_grad(true);
    std::vector<std::string> ops;
    // Leaves differ by design (trainable parameters join the graph); operators must not.
    for (const Node* n : record_graph(sum(forward_embed(m, x))).order)
      if (n->op != "leaf") ops.push_back(n->op);
    return ops;
  };
  const auto reference = ops_for(LayerSet{});
  EXPECT_GT(reference.size(), 20u);
  for (const auto& set : ablation_layer_sets()) EXPECT_EQ(ops_for(set), reference) << set.to_string();
}

TEST(Teacher, CloneContracts) {
  Model student = build_backbone(BackboneConfig{});
  partition_parameters(student, LayerSet{Unit::LN, Unit::ST, Unit::S0});
  const Model teacher = clone_teacher(student);
  for (const auto& p : teacher.parameters()) {
    EXPECT_EQ(p.partition, Partition::Frozen);
    EXPECT_FALSE(p.value.requires_grad());
  }
  const Tensor probe = random_batch(2, 10);
  const Tensor t0 = forward_embed(teacher, probe);
  EXPECT_EQ(std::memcmp(t0.data().data(), forward_embed(student, probe).data().data(), t0.numel() * sizeof(float)), 0);

  const std::string teacher_bytes = bytes_of(teacher);
  for (int step = 0; step < 100; ++step) {
    student.zero_grad();
    backward(sum(forward_embed(student, probe)));
    for (auto* p : student.trainable()) {
      auto w = p->value.mutable_data();
      const auto g = p->value.grad();
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= 1e-3f * g[i];
    }
  }
  EXPECT_EQ(bytes_of(teacher), teacher_bytes);
  const Tensor t1 = forward_embed(teacher, probe);
  EXPECT_EQ(std::memcmp(t0.data().data(), t1.data().data(), t0.numel() * sizeof(float)), 0);
  EXPECT_NE(bytes_of(student), teacher_bytes);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  TempDir dir;
  Model m = build_backbone(BackboneConfig{});
  partition_parameters(m, LayerSet{Unit::LN, Unit::S1});
  save_checkpoint(m, dir.path() / "a.xsfc");
  const Model loaded = load_checkpoint(dir.path() / "a.xsfc");
  save_checkpoint(loaded, dir.path() / "b.xsfc");
  EXPECT_EQ(read_file_bytes(dir.path() / "a.xsfc"), read_file_bytes(dir.path() / "b.xsfc"));
  EXPECT_EQ(loaded.config(), m.config());
  ASSERT_TRUE(loaded.layer_set().has_value());
  EXPECT_EQ(*loaded.layer_set(), *m.layer_set());
  for (const auto& p : m.parameters()) EXPECT_EQ(loaded.param(p.name).partition, p.partition);
}

TEST(Checkpoint, ForwardIsBitwiseEqualAfterLoad) {
  TempDir dir;
  BackboneConfig c;
  c.seed = 21;
  const Model m = build_backbone(c);
  save_checkpoint(m, dir.path() / "m.xsfc");
  const Tensor x = random_batch(2, 11);
  const Tensor a = forward_embed(m, x), b = forward_embed(load_checkpoint(dir.path() / "m.xsfc"), x);
  EXPECT_EQ(std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)), 0);
}

TEST(Checkpoint, FlippedMagicIsCorrupt) {
  TempDir dir;
  save_checkpoint(build_backbone(BackboneConfig{}), dir.path() / "m.xsfc");
  std::string bytes = read_file_bytes(dir.path() / "m.xsfc");
  bytes[0] = 'Y';
  write_file_bytes(dir.path() / "m.xsfc", bytes);
  try {
    load_checkpoint(dir.path() / "m.xsfc");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::CorruptCheckpoint);
    EXPECT_NE(std::string(e.what()).find("offset 0"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, TruncationReportsOffset) {
  TempDir dir;
  save_checkpoint(build_backbone(BackboneConfig{}), dir.path() / "m.xsfc");
  const std::string bytes = read_file_bytes(dir.path() / "m.xsfc");
  write_file_bytes(dir.path() / "m.xsfc", bytes.substr(0, bytes.size() - 3));
  try {
    load_checkpoint(dir.path() / "m.xsfc");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::CorruptCheckpoint);
    EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos);
  }
}

TEST(Checkpoint, ParameterMismatchIsCorrupt) {
  Container c = model_to_container(build_backbone(BackboneConfig{}));
  c.entries.pop_back();
  EXPECT_THROW(model_from_container(c), Error);
}

TEST(BackboneConfig, TextRoundTrip) {
  BackboneConfig c;
  c.stage_channels = {12, 24, 48};
  c.s2_heads = 4;
  c.seed = 123;
  EXPECT_EQ(BackboneConfig::from_text(c.to_text()), c);
  EXPECT_THROW(BackboneConfig::from_text("bogus=1\n"), Error);
}
