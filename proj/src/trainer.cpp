#include "xsf/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "xsf/error.hpp"
#include "xsf/objectives.hpp"
#include "xsf/ops.hpp"
#include "xsf/random.hpp"

namespace xsf {

void adam_step(std::span<Parameter* const> params, AdamState& state, float lr) {
  for (const Parameter* p : params) {
    if (p->partition != Partition::Frozen && !p->value.has_grad()) {
      throw Error(ErrorKind::InvalidState, "adam_step: trainable parameter '" + p->name + "' has no gradient");
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(static_cast<double>(state.beta1), static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(static_cast<double>(state.beta2), static_cast<double>(state.step));
  for (Parameter* p : params) {
    if (p->partition == Partition::Frozen) continue;
    auto& mom = state.moments[p->name];
    const std::size_t n = p->value.numel();
    if (mom.m.size() != n) {
      mom.m.assign(n, 0.0f);
      mom.v.assign(n, 0.0f);
    }
    auto w = p->value.mutable_data();
    const auto g = p->value.grad();
    for (std::size_t i = 0; i < n; ++i) {
      mom.m[i] = state.beta1 * mom.m[i] + (1.0f - state.beta1) * g[i];
      mom.v[i] = state.beta2 * mom.v[i] + (1.0f - state.beta2) * g[i] * g[i];
      const double m_hat = mom.m[i] / bc1;
      const double v_hat = mom.v[i] / bc2;
      w[i] = static_cast<float>(w[i] - lr * m_hat / (std::sqrt(v_hat) + state.eps));
    }
  }
}

void PretrainConfig::validate() const {
  if (!(lr > 0.0f) || batch == 0 || !(logit_scale > 0.0f)) {
    throw Error(ErrorKind::InvalidConfig, "pretrain: lr, batch and logit scale must be positive");
  }
}

void AdaptConfig::validate() const {
  LossConfig{margin, lambda}.validate();
  if (!(lr > 0.0f) || batch == 0) throw Error(ErrorKind::InvalidConfig, "adapt: lr and batch must be positive");
}

Tensor embed_entries(const Model& model, const IdentityDataset& dataset, std::span<const std::size_t> indices,
                     std::size_t chunk) {
  NoGradGuard guard;
  const std::size_t D = model.config().embed_dim;
  std::vector<float> out(indices.size() * D);
  for (std::size_t start = 0; start < indices.size(); start += chunk) {
    const auto part = indices.subspan(start, std::min(chunk, indices.size() - start));
    const Tensor e = forward_embed(model, stack_images(dataset, part));
    std::copy(e.data().begin(), e.data().end(), out.begin() + start * D);
  }
  return Tensor({indices.size(), D}, std::move(out));
}

Model pretrain(const Model& model, const IdentityDataset& dataset, std::span<const std::uint32_t> ids,
               const PretrainConfig& cfg, PretrainLog* log) {
  cfg.validate();
  Model out(model);
  if (cfg.epochs == 0) return out;

  std::vector<std::size_t> samples;
  std::vector<std::size_t> labels_of;  // parallel to samples: class index
  std::vector<std::uint32_t> sorted(ids.begin(), ids.end());
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t k = 0; k < sorted.size(); ++k) {
    const auto idx = dataset.indices_of(sorted[k], Modality::Source);
    if (idx.empty()) throw Error(ErrorKind::Protocol, "pretrain: identity " + std::to_string(sorted[k]) + " has no source images");
    for (auto i : idx) {
      samples.push_back(i);
      labels_of.push_back(k);
    }
  }

  std::vector<Parameter> head;
  {
    const std::size_t K = sorted.size(), D = out.config().embed_dim;
    std::vector<float> w(K * D);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<float>(counter_normal(cfg.seed, 0x4ead, i));
    head.push_back({"classifier.weight", Tensor({K, D}, std::move(w), true), Partition::Adapted});
  }
  const auto saved_tags = [&] {
    std::vector<Partition> tags;
    for (const auto& p : out.parameters()) tags.push_back(p.partition);
    return tags;
  }();
  std::vector<Parameter*> trainable;
  for (auto& p : out.parameters()) {
    p.partition = Partition::Adapted;
    p.value.set_requires_grad(true);
    trainable.push_back(&p);
  }
  trainable.push_back(&head[0]);

  AdamState adam;
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    fisher_yates(order, rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t n = std::min(cfg.batch, order.size() - start);
      std::vector<std::size_t> idx(n), labels(n);
      for (std::size_t i = 0; i < n; ++i) {
        idx[i] = samples[order[start + i]];
        labels[i] = labels_of[order[start + i]];
      }
      const Tensor emb = forward_embed(out, stack_images(dataset, idx));
      const Tensor logits = scale(linear(l2_normalize_rows(emb), l2_normalize_rows(head[0].value)), cfg.logit_scale);
      const Tensor loss = cross_entropy(logits, labels);
      backward(loss);
      adam_step(trainable, adam, cfg.lr);
      for (auto* p : trainable) p->value.clear_grad();
      epoch_loss += loss.item();
      ++batches;
    }
    if (log) log->epoch_loss.push_back(epoch_loss / static_cast<double>(batches));
  }

  auto& params = out.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i].partition = saved_tags[i];
    params[i].value.set_requires_grad(saved_tags[i] != Partition::Frozen);
  }
  return out;
}

namespace {

// Sorted unique values plus, for each input, its position in that list.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> dedupe(const std::vector<std::size_t>& items) {
  std::vector<std::size_t> uniq(items);
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  std::vector<std::size_t> pos(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    pos[i] = static_cast<std::size_t>(std::lower_bound(uniq.begin(), uniq.end(), items[i]) - uniq.begin());
  }
  return {std::move(uniq), std::move(pos)};
}

}  // namespace

Model adapt(const Model& student_in, const Model& teacher, std::span<const PairSample> pairs,
            const IdentityDataset& dataset, const AdaptConfig& cfg, std::vector<AdaptLogRow>* log) {
  cfg.validate();
  if (!student_in.layer_set()) throw Error(ErrorKind::InvalidState, "adapt: student has not been partitioned");
  if (!(*student_in.layer_set() == cfg.layer_set)) {
    throw Error(ErrorKind::InvalidState, "adapt: student partitioned as " + student_in.layer_set()->to_string() +
                                             " but config asks for " + cfg.layer_set.to_string());
  }
  if (pairs.empty()) throw Error(ErrorKind::Protocol, "adapt: empty pair list");
  for (const auto& p : pairs) {
    if (p.source_index >= dataset.entries.size() || p.target_index >= dataset.entries.size() ||
        dataset.entries[p.source_index].modality != Modality::Source ||
        dataset.entries[p.target_index].modality != Modality::Target) {
      throw Error(ErrorKind::Protocol, "adapt: pair does not reference a (source, target) entry pair");
    }
  }

  Model student(student_in);
  auto trainable = student.trainable();

  // The teacher is frozen, so its source embeddings are fixed for the whole run.
  std::vector<std::size_t> all_sources;
  for (const auto& p : pairs) all_sources.push_back(p.source_index);
  const auto [teacher_rows, unused] = dedupe(all_sources);
  const Tensor teacher_emb = embed_entries(teacher, dataset, teacher_rows);
  std::map<std::size_t, std::size_t> teacher_row_of;
  for (std::size_t i = 0; i < teacher_rows.size(); ++i) teacher_row_of[teacher_rows[i]] = i;

  AdamState adam;
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    fisher_yates(order, rng);
    std::size_t batch_no = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch, ++batch_no) {
      const std::size_t n = std::min(cfg.batch, order.size() - start);
      std::vector<std::size_t> src(n), tgt(n);
      std::vector<int> y(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto& p = pairs[order[start + i]];
        src[i] = p.source_index;
        tgt[i] = p.target_index;
        y[i] = p.y;
      }
      const auto [src_unique, src_pos] = dedupe(src);
      const auto [tgt_unique, tgt_pos] = dedupe(tgt);
      const Tensor src_emb = forward_embed(student, stack_images(dataset, src_unique));
      const Tensor tgt_emb = forward_embed(student, stack_images(dataset, tgt_unique));

      const Tensor l_c = contrastive_loss_batch(index_rows(src_emb, src_pos), index_rows(tgt_emb, tgt_pos), y, cfg.margin);
      std::vector<std::size_t> trows(src_unique.size());
      for (std::size_t i = 0; i < src_unique.size(); ++i) trows[i] = teacher_row_of.at(src_unique[i]);
      const Tensor l_sdl = self_distillation_loss_batch(index_rows(teacher_emb, trows), src_emb);
      const Tensor total = total_loss(l_c, l_sdl, cfg.lambda);

      if (total.requires_grad()) {
        backward(total);
        adam_step(trainable, adam, cfg.lr);
        student.zero_grad();
      }
      if (log) log->push_back({epoch, batch_no, l_c.item(), l_sdl.item(), total.item()});
    }
  }
  return student;
}

void write_training_log(std::span<const AdaptLogRow> rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu\t%zu\t%.8g\t%.8g\t%.8g\n", r.epoch, r.batch, r.contrastive, r.distillation, r.total);
    out << buf;
  }
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

std::vector<AdaptLogRow> read_training_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  std::vector<AdaptLogRow> rows;
  std::string line;
  while (std::getline(in, line)) {
    AdaptLogRow r;
    std::istringstream is(line);
    if (!(is >> r.epoch >> r.batch >> r.contrastive >> r.distillation >> r.total)) {
      throw Error(ErrorKind::CorruptData, path.string() + ": malformed log line '" + line + "'");
    }
    rows.push_back(r);
  }
  return rows;
}

}  // namespace xsf
