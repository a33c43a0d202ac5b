#include "xsf/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "xsf/container.hpp"
#include "xsf/error.hpp"
#include "xsf/ops.hpp"
#include "xsf/trainer.hpp"

namespace xsf {

namespace {

// Genuine and impostor scores mapped to "higher is better". Negation keeps ties exact.
struct Split {
  std::vector<double> genuine, impostor;
};

Split split_scores(const ScoreSet& scores, ScoreKind kind, const char* what) {
  Split s;
  for (const auto& r : scores.records) {
    if (!std::isfinite(r.score)) throw Error(ErrorKind::Protocol, std::string(what) + ": non-finite score");
    const double v = kind == ScoreKind::Similarity ? r.score : -static_cast<double>(r.score);
    (r.genuine ? s.genuine : s.impostor).push_back(v);
  }
  if (s.genuine.empty() || s.impostor.empty()) {
    throw Error(ErrorKind::Protocol, std::string(what) + ": needs both genuine and impostor scores");
  }
  std::sort(s.genuine.begin(), s.genuine.end());
  std::sort(s.impostor.begin(), s.impostor.end());
  return s;
}

// Candidate thresholds: unique values, midpoints between neighbours, and one
// value above the maximum (reject everything). Ascending.
std::vector<double> sweep(const Split& s) {
  std::vector<double> all(s.genuine);
  all.insert(all.end(), s.impostor.begin(), s.impostor.end());
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  std::vector<double> t;
  t.reserve(all.size() * 2);
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (i > 0) t.push_back(0.5 * (all[i - 1] + all[i]));
    t.push_back(all[i]);
  }
  t.push_back(std::nextafter(all.back(), std::numeric_limits<double>::infinity()));
  return t;
}

// Count of sorted values >= t.
std::size_t count_at_least(const std::vector<double>& sorted, double t) {
  return static_cast<std::size_t>(sorted.end() - std::lower_bound(sorted.begin(), sorted.end(), t));
}

double external_threshold(double t, ScoreKind kind) { return kind == ScoreKind::Similarity ? t : -t; }

}  // namespace

ScoreSet score_matrix(const Model& model, const IdentityDataset& dataset, std::span<const std::size_t> gallery,
                      std::span<const std::size_t> probes) {
  if (gallery.empty() || probes.empty()) throw Error(ErrorKind::Protocol, "score_matrix: empty gallery or probe set");
  const Tensor g = embed_entries(model, dataset, gallery);
  const Tensor p = embed_entries(model, dataset, probes);
  const std::size_t D = g.dim(1);
  auto norms = [&](const Tensor& e, std::span<const std::size_t> idx) {
    std::vector<double> n(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      double s = 0.0;
      for (std::size_t d = 0; d < D; ++d) s += static_cast<double>(e.data()[i * D + d]) * e.data()[i * D + d];
      n[i] = std::sqrt(s);
      if (n[i] == 0.0) {
        throw Error(ErrorKind::DegenerateInput, "score_matrix: zero-norm embedding for " + dataset.entries[idx[i]].path);
      }
    }
    return n;
  };
  const auto gn = norms(g, gallery);
  const auto pn = norms(p, probes);

  ScoreSet out;
  out.records.reserve(gallery.size() * probes.size());
  for (std::size_t i = 0; i < probes.size(); ++i) {
    const auto& pe = dataset.entries[probes[i]];
    for (std::size_t j = 0; j < gallery.size(); ++j) {
      const auto& ge = dataset.entries[gallery[j]];
      double dot = 0.0;
      for (std::size_t d = 0; d < D; ++d) dot += static_cast<double>(p.data()[i * D + d]) * g.data()[j * D + d];
      out.records.push_back({pe.path, ge.path, pe.identity == ge.identity, static_cast<float>(dot / (pn[i] * gn[j]))});
    }
  }
  return out;
}

OperatingPoint eer(const ScoreSet& scores, ScoreKind kind) {
  const Split s = split_scores(scores, kind, "eer");
  const double ng = static_cast<double>(s.genuine.size()), ni = static_cast<double>(s.impostor.size());
  double best_gap = std::numeric_limits<double>::infinity();
  OperatingPoint best;
  for (double t : sweep(s)) {
    const double far = static_cast<double>(count_at_least(s.impostor, t)) / ni;
    // Counted rejections rather than 1 - TAR, so rates like 1/3 are exact.
    const double frr = static_cast<double>(s.genuine.size() - count_at_least(s.genuine, t)) / ng;
    const double gap = std::abs(far - frr);
    if (gap < best_gap) {  // strict: ties keep the lower threshold
      best_gap = gap;
      best = {(far + frr) / 2.0, external_threshold(t, kind)};
    }
  }
  return best;
}

double auc(const ScoreSet& scores, ScoreKind kind) {
  const Split s = split_scores(scores, kind, "auc");
  // Mann-Whitney: walk the sorted impostors once per distinct genuine value.
  double wins = 0.0;
  for (double g : s.genuine) {
    const auto lo = std::lower_bound(s.impostor.begin(), s.impostor.end(), g);
    const auto hi = std::upper_bound(lo, s.impostor.end(), g);
    wins += static_cast<double>(lo - s.impostor.begin()) + 0.5 * static_cast<double>(hi - lo);
  }
  return wins / (static_cast<double>(s.genuine.size()) * static_cast<double>(s.impostor.size()));
}

OperatingPoint vr_at_far(const ScoreSet& scores, double far_target, ScoreKind kind) {
  if (!(far_target > 0.0 && far_target < 1.0)) throw Error(ErrorKind::InvalidCall, "vr_at_far: target must lie in (0,1)");
  const Split s = split_scores(scores, kind, "vr_at_far");
  const double ng = static_cast<double>(s.genuine.size()), ni = static_cast<double>(s.impostor.size());
  for (double t : sweep(s)) {
    const double far = static_cast<double>(count_at_least(s.impostor, t)) / ni;
    if (far <= far_target) return {static_cast<double>(count_at_least(s.genuine, t)) / ng, external_threshold(t, kind)};
  }
  throw Error(ErrorKind::InvalidState, "vr_at_far: sweep ended without a reject-all point");
}

double rank1(const ScoreSet& scores, ScoreKind kind) {
  struct Best {
    double score;
    bool genuine;
    bool has_genuine;
  };
  std::vector<std::string> order;
  std::map<std::string, Best> best;
  for (const auto& r : scores.records) {
    const double v = kind == ScoreKind::Similarity ? r.score : -static_cast<double>(r.score);
    auto it = best.find(r.probe_id);
    if (it == best.end()) {
      order.push_back(r.probe_id);
      best.emplace(r.probe_id, Best{v, r.genuine, r.genuine});
      continue;
    }
    it->second.has_genuine = it->second.has_genuine || r.genuine;
    if (v > it->second.score) {
      it->second.score = v;
      it->second.genuine = r.genuine;
    }
  }
  if (order.empty()) throw Error(ErrorKind::Protocol, "rank1: empty score set");
  std::size_t hits = 0;
  for (const auto& probe : order) {
    const Best& b = best.at(probe);
    if (!b.has_genuine) throw Error(ErrorKind::Protocol, "rank1: probe " + probe + " has no mate in the gallery");
    hits += b.genuine ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(order.size());
}

double rank1(const Tensor& gallery, std::span<const std::uint32_t> gallery_ids, const Tensor& probes,
             std::span<const std::uint32_t> probe_ids) {
  if (gallery.rank() != 2 || probes.rank() != 2 || gallery.dim(1) != probes.dim(1) ||
      gallery.dim(0) != gallery_ids.size() || probes.dim(0) != probe_ids.size()) {
    throw Error(ErrorKind::InvalidShape, "rank1: embeddings " + shape_str(gallery.dims()) + " / " +
                                             shape_str(probes.dims()) + " do not match the id lists");
  }
  for (auto id : probe_ids) {
    if (std::find(gallery_ids.begin(), gallery_ids.end(), id) == gallery_ids.end()) {
      throw Error(ErrorKind::Protocol, "rank1: probe identity " + std::to_string(id) + " absent from gallery");
    }
  }
  NoGradGuard guard;
  const Tensor g = l2_normalize_rows(gallery);
  const Tensor p = l2_normalize_rows(probes);
  const std::size_t G = g.dim(0), D = g.dim(1);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < probe_ids.size(); ++i) {
    std::size_t arg = 0;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < G; ++j) {
      double dot = 0.0;
      for (std::size_t d = 0; d < D; ++d) dot += static_cast<double>(p.data()[i * D + d]) * g.data()[j * D + d];
      if (dot > best) {
        best = dot;
        arg = j;
      }
    }
    hits += gallery_ids[arg] == probe_ids[i] ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(probe_ids.size());
}

VerificationReport evaluate(const ScoreSet& scores) {
  VerificationReport r;
  r.auc = auc(scores);
  const auto e = eer(scores);
  r.eer = e.rate;
  r.eer_threshold = e.threshold;
  r.rank1 = rank1(scores);
  for (std::size_t i = 0; i < kFarTargets.size(); ++i) {
    const auto v = vr_at_far(scores, kFarTargets[i]);
    r.vr[i] = v.rate;
    r.vr_threshold[i] = v.threshold;
  }
  return r;
}

std::vector<std::pair<std::string, double>> report_metrics(const VerificationReport& r) {
  return {{"auc", r.auc},           {"eer", r.eer},
          {"rank1", r.rank1},       {"vr@far=0.0001", r.vr[0]},
          {"vr@far=0.001", r.vr[1]}, {"vr@far=0.01", r.vr[2]},
          {"vr@far=0.05", r.vr[3]}};
}

FoldReport aggregate_folds(std::span<const VerificationReport> reports) {
  if (reports.empty()) throw Error(ErrorKind::Protocol, "aggregate_folds: no folds");
  FoldReport out;
  out.folds.assign(reports.begin(), reports.end());
  for (const auto& [name, value] : report_metrics(reports[0])) out.metric_names.push_back(name);
  const std::size_t m = out.metric_names.size();
  const double n = static_cast<double>(reports.size());
  out.mean.assign(m, 0.0);
  out.stddev.assign(m, 0.0);
  std::vector<std::vector<double>> values(m);
  for (const auto& r : reports) {
    const auto metrics = report_metrics(r);
    for (std::size_t k = 0; k < m; ++k) values[k].push_back(metrics[k].second);
  }
  for (std::size_t k = 0; k < m; ++k) {
    // Shifted by the first fold so identical folds give exactly zero spread.
    const double v0 = values[k][0];
    double shift = 0.0;
    for (double v : values[k]) shift += v - v0;
    shift /= n;
    out.mean[k] = v0 + shift;
    if (reports.size() > 1) {
      double ss = 0.0;
      for (double v : values[k]) ss += (v - v0 - shift) * (v - v0 - shift);
      out.stddev[k] = std::sqrt(ss / (n - 1.0));
    }
  }
  return out;
}

void export_scores(const ScoreSet& scores, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << "probe_id,reference_id,label,score\n";
  char buf[32];
  for (const auto& r : scores.records) {
    // Nine significant digits round-trip every float, so reloaded scores tie exactly where the originals did.
    std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(r.score));
    out << r.probe_id << ',' << r.reference_id << ',' << (r.genuine ? 1 : 0) << ',' << buf << '\n';
  }
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

ScoreSet load_scores(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "probe_id,reference_id,label,score") {
    throw Error(ErrorKind::CorruptData, path.string() + ": missing score CSV header");
  }
  ScoreSet out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 4 || (f[2] != "0" && f[2] != "1")) {
      throw Error(ErrorKind::CorruptData, path.string() + ": malformed row at line " + std::to_string(lineno));
    }
    char* end = nullptr;
    const float score = std::strtof(f[3].c_str(), &end);
    if (end == f[3].c_str() || *end != '\0') {
      throw Error(ErrorKind::CorruptData, path.string() + ": bad score at line " + std::to_string(lineno));
    }
    out.records.push_back({f[0], f[1], f[2] == "1", score});
  }
  return out;
}

void export_embeddings(const Model& model, const IdentityDataset& dataset, std::span<const std::size_t> indices,
                       const std::filesystem::path& path) {
  const Tensor e = embed_entries(model, dataset, indices);
  const std::size_t D = e.dim(1);
  Container c;
  c.header = "kind=embeddings\n";
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::vector<float> row(e.data().begin() + i * D, e.data().begin() + (i + 1) * D);
    c.entries.push_back({dataset.entries[indices[i]].path, Partition::Frozen, Tensor({D}, std::move(row))});
  }
  write_container(c, path);
}

std::string format_report(const VerificationReport& report) {
  std::string out;
  char buf[96];
  for (const auto& [name, value] : report_metrics(report)) {
    std::snprintf(buf, sizeof buf, "%s=%.6f\n", name.c_str(), value);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "eer_threshold=%.6f\n", report.eer_threshold);
  out += buf;
  for (std::size_t i = 0; i < kFarTargets.size(); ++i) {
    std::snprintf(buf, sizeof buf, "vr_threshold@far=%g=%.6f\n", kFarTargets[i], report.vr_threshold[i]);
    out += buf;
  }
  return out;
}

std::string format_fold_report(const FoldReport& report) {
  std::string out = "metric\tmean\tstd\n";
  char buf[96];
  for (std::size_t k = 0; k < report.metric_names.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%s\t%.6f\t%.6f\n", report.metric_names[k].c_str(), report.mean[k], report.stddev[k]);
    out += buf;
  }
  return out;
}

}  // namespace xsf
