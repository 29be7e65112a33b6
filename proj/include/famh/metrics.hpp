#pragma once
// Classification metrics, embedding export, and PCA projection.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "famh/autodiff.hpp"
#include "famh/common.hpp"
#include "famh/ingest.hpp"
#include "famh/model.hpp"

namespace famh::eval {

struct ConfusionMatrix {
  int n_classes = 0;
  std::vector<int64_t> counts;  // row = true class, col = predicted

  explicit ConfusionMatrix(int classes = 0)
      : n_classes(classes),
        counts(static_cast<size_t>(classes) * static_cast<size_t>(classes), 0) {}

  int64_t& at(int t, int p) { return counts[static_cast<size_t>(t) * n_classes + p]; }
  int64_t at(int t, int p) const { return counts[static_cast<size_t>(t) * n_classes + p]; }

  int64_t total() const {
    int64_t n = 0;
    for (int64_t c : counts) n += c;
    return n;
  }
};

// Lowest index wins ties.
template <class T>
int argmax_logits(std::span<const T> logits) {
  int best = 0;
  for (size_t j = 1; j < logits.size(); ++j)
    if (logits[j] > logits[best]) best = static_cast<int>(j);
  return best;
}

// Pairs whose truth equals `missing` are skipped.
ConfusionMatrix confusion(std::span<const int> preds, std::span<const int> truths, int n_classes,
                          int missing);

// Mean per-class recall over classes with at least one true instance.
double balanced_accuracy(const ConfusionMatrix& cm);

double cohens_kappa(const ConfusionMatrix& cm);

struct EmbeddingSet {
  ad::Tensor<float> embeddings;  // one row per patch token
  std::vector<int> labels;       // aligned; missing index when unlabeled
};

// Encoder outputs over non-overlapping windows (stride = window length), no
// masking, aligned to patch labels when a track exists.
EmbeddingSet export_embeddings(const model::MaeParams<float>& params,
                               const model::ModelConfig& cfg, const ingest::RecordingStore& store,
                               const std::vector<std::string>& ids);

struct PcaResult {
  ad::Tensor<double> projected;          // N x k_effective
  std::vector<double> explained_ratio;   // per returned component
  ad::Tensor<double> components;         // d x k_effective, columns are eigenvectors
  bool rank_deficient = false;
};

// Mean-centered projection onto the top-k covariance eigenvectors. Fewer than
// k nonzero eigenvalues returns the available components and sets the flag.
PcaResult pca_project(const ad::Tensor<double>& data, int k);

}  // namespace famh::eval
