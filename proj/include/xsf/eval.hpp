#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xsf/backbone.hpp"
#include "xsf/synthdata.hpp"

namespace xsf {

struct ScoreRecord {
  std::string probe_id;
  std::string reference_id;
  bool genuine = false;
  float score = 0.0f;  // cosine similarity
};

struct ScoreSet {
  std::vector<ScoreRecord> records;
};

// Scores are similarities (accept iff score >= t) or distances (accept iff score <= t).
enum class ScoreKind { Similarity, Distance };

struct OperatingPoint {
  double rate = 0.0;
  double threshold = 0.0;
};

inline constexpr std::array<double, 4> kFarTargets{1e-4, 1e-3, 1e-2, 5e-2};

struct VerificationReport {
  double auc = 0.0;
  double eer = 0.0;
  double eer_threshold = 0.0;
  double rank1 = 0.0;
  std::array<double, 4> vr{};            // indexed like kFarTargets
  std::array<double, 4> vr_threshold{};
};

struct FoldReport {
  std::vector<VerificationReport> folds;
  std::vector<std::string> metric_names;
  std::vector<double> mean, stddev;  // parallel to metric_names
};

// One record per (probe, gallery entry), probe-major, gallery order preserved.
ScoreSet score_matrix(const Model& model, const IdentityDataset& dataset, std::span<const std::size_t> gallery,
                      std::span<const std::size_t> probes);

OperatingPoint eer(const ScoreSet& scores, ScoreKind kind = ScoreKind::Similarity);
double auc(const ScoreSet& scores, ScoreKind kind = ScoreKind::Similarity);
OperatingPoint vr_at_far(const ScoreSet& scores, double far_target, ScoreKind kind = ScoreKind::Similarity);

// Identification from a ScoreSet: each probe's best-scoring reference (first on ties).
double rank1(const ScoreSet& scores, ScoreKind kind = ScoreKind::Similarity);
// Identification from raw embeddings [G,D] and [P,D]; ties go to the lower gallery index.
double rank1(const Tensor& gallery, std::span<const std::uint32_t> gallery_ids, const Tensor& probes,
             std::span<const std::uint32_t> probe_ids);

VerificationReport evaluate(const ScoreSet& scores);
std::vector<std::pair<std::string, double>> report_metrics(const VerificationReport& report);
FoldReport aggregate_folds(std::span<const VerificationReport> reports);

void export_scores(const ScoreSet& scores, const std::filesystem::path& path);
ScoreSet load_scores(const std::filesystem::path& path);
void export_embeddings(const Model& model, const IdentityDataset& dataset, std::span<const std::size_t> indices,
                       const std::filesystem::path& path);
// key=value lines for a single report.
std::string format_report(const VerificationReport& report);
// metric<TAB>mean<TAB>std lines.
std::string format_fold_report(const FoldReport& report);

}  // namespace xsf
