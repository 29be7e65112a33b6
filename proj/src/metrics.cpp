#include "famh/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace famh::eval {

ConfusionMatrix confusion(std::span<const int> preds, std::span<const int> truths, int n_classes,
                          int missing) {
  if (preds.size() != truths.size())
    raise(Err::length_mismatch, "prediction and truth lengths differ");
  ConfusionMatrix cm(n_classes);
  for (size_t i = 0; i < preds.size(); ++i) {
    int t = truths[i];
    if (t == missing) continue;
    int p = preds[i];
    if (t < 0 || t >= n_classes || p < 0 || p >= n_classes)
      raise(Err::length_mismatch, "class index out of range in confusion counts");
    ++cm.at(t, p);
  }
  return cm;
}

double balanced_accuracy(const ConfusionMatrix& cm) {
  if (cm.total() == 0) raise(Err::empty_matrix, "confusion matrix has no labeled pairs");
  double acc = 0.0;
  int present = 0;
  for (int t = 0; t < cm.n_classes; ++t) {
    int64_t row = 0;
    for (int p = 0; p < cm.n_classes; ++p) row += cm.at(t, p);
    if (row == 0) continue;  // classes absent from the split stay out of the mean
    acc += static_cast<double>(cm.at(t, t)) / static_cast<double>(row);
    ++present;
  }
  if (present == 0) raise(Err::empty_matrix, "no class has a true instance");
  return acc / static_cast<double>(present);
}

double cohens_kappa(const ConfusionMatrix& cm) {
  const int64_t total = cm.total();
  if (total == 0) raise(Err::empty_matrix, "confusion matrix has no labeled pairs");
  double po = 0.0, pe = 0.0;
  for (int c = 0; c < cm.n_classes; ++c) {
    po += static_cast<double>(cm.at(c, c));
    int64_t row = 0, col = 0;
    for (int j = 0; j < cm.n_classes; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    pe += static_cast<double>(row) * static_cast<double>(col);
  }
  po /= static_cast<double>(total);
  pe /= static_cast<double>(total) * static_cast<double>(total);
  if (std::abs(1.0 - pe) < 1e-15)
    raise(Err::degenerate_marginals, "expected agreement is 1, kappa undefined");
  return (po - pe) / (1.0 - pe);
}

EmbeddingSet export_embeddings(const model::MaeParams<float>& params,
                               const model::ModelConfig& cfg, const ingest::RecordingStore& store,
                               const std::vector<std::string>& ids) {
  ingest::WindowGeometry geo{cfg.patch_len, cfg.patch_count};
  const size_t W = geo.window_samples();

  EmbeddingSet out;
  std::vector<float> rows;
  for (const auto& id : ids) {
    const auto& rec = store.get(id);
    const auto* track = store.labels(id);
    for (const auto& seg : rec.wear_segments) {
      for (size_t off = seg.first; off + W <= seg.second; off += W) {
        ingest::Window w = ingest::make_window(rec, off, geo);
        auto patches = ingest::patchify(w);
        ad::Tape<float> tape;
        auto h = model::attach(tape, params, model::Trainable::none);
        int enc = model::forward_encode(tape, h, cfg, patches);
        const auto& tokens = tape.value(enc);
        rows.insert(rows.end(), tokens.v.begin(), tokens.v.end());
        if (track != nullptr) {
          auto labs = ingest::map_labels(*track, w);
          out.labels.insert(out.labels.end(), labs.begin(), labs.end());
        } else {
          out.labels.insert(out.labels.end(), static_cast<size_t>(cfg.patch_count),
                            cfg.n_classes);
        }
      }
    }
  }
  out.embeddings = ad::Tensor<float>(rows.size() / static_cast<size_t>(cfg.embed_dim),
                                     static_cast<size_t>(cfg.embed_dim));
  out.embeddings.v = std::move(rows);
  return out;
}

namespace {

// Cyclic Jacobi eigendecomposition of a symmetric matrix.
void jacobi_eigen(std::vector<double>& a, int n, std::vector<double>& eigvals,
                  std::vector<double>& eigvecs) {
  eigvecs.assign(static_cast<size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) eigvecs[static_cast<size_t>(i) * n + i] = 1.0;

  auto A = [&](int i, int j) -> double& { return a[static_cast<size_t>(i) * n + j]; };
  auto V = [&](int i, int j) -> double& { return eigvecs[static_cast<size_t>(i) * n + j]; };

  double scale = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = i; j < n; ++j) scale = std::max(scale, std::abs(A(i, j)));
  const double tol = std::max(scale, 1e-300) * 1e-14;

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) off = std::max(off, std::abs(A(i, j)));
    if (off < tol) break;
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        double apq = A(p, q);
        if (std::abs(apq) < tol * 1e-2) continue;
        double theta = (A(q, q) - A(p, p)) / (2.0 * apq);
        double t =
            (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        double c = 1.0 / std::sqrt(t * t + 1.0);
        double s = t * c;
        for (int k = 0; k < n; ++k) {
          double akp = A(k, p), akq = A(k, q);
          A(k, p) = c * akp - s * akq;
          A(k, q) = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          double apk = A(p, k), aqk = A(q, k);
          A(p, k) = c * apk - s * aqk;
          A(q, k) = s * apk + c * aqk;
        }
        for (int k = 0; k < n; ++k) {
          double vkp = V(k, p), vkq = V(k, q);
          V(k, p) = c * vkp - s * vkq;
          V(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  eigvals.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) eigvals[static_cast<size_t>(i)] = A(i, i);
}

}  // namespace

PcaResult pca_project(const ad::Tensor<double>& data, int k) {
  const size_t N = data.rows;
  const size_t d = data.cols;
  if (k < 1 || N <= static_cast<size_t>(k)) raise(Err::shape_mismatch, "pca needs N > k >= 1");

  std::vector<double> mean(d, 0.0);
  for (size_t i = 0; i < N; ++i)
    for (size_t j = 0; j < d; ++j) mean[j] += data.at(i, j);
  for (double& m : mean) m /= static_cast<double>(N);

  ad::Tensor<double> centered(N, d);
  for (size_t i = 0; i < N; ++i)
    for (size_t j = 0; j < d; ++j) centered.at(i, j) = data.at(i, j) - mean[j];

  std::vector<double> cov(d * d, 0.0);
  for (size_t i = 0; i < N; ++i) {
    const double* row = centered.row(i);
    for (size_t a = 0; a < d; ++a) {
      double ra = row[a];
      if (ra == 0.0) continue;
      for (size_t b = a; b < d; ++b) cov[a * d + b] += ra * row[b];
    }
  }
  for (size_t a = 0; a < d; ++a)
    for (size_t b = a; b < d; ++b) {
      cov[a * d + b] /= static_cast<double>(N - 1);
      cov[b * d + a] = cov[a * d + b];
    }

  std::vector<double> eigvals, eigvecs;
  jacobi_eigen(cov, static_cast<int>(d), eigvals, eigvecs);

  std::vector<size_t> order(d);
  for (size_t i = 0; i < d; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return eigvals[a] > eigvals[b]; });

  double total_var = 0.0;
  double top = std::max(eigvals[order[0]], 0.0);
  for (double v : eigvals) total_var += std::max(v, 0.0);

  int k_eff = 0;
  for (int i = 0; i < k && static_cast<size_t>(i) < d; ++i) {
    double v = std::max(eigvals[order[static_cast<size_t>(i)]], 0.0);
    if (v <= top * 1e-12 || v == 0.0) break;
    ++k_eff;
  }
  PcaResult res;
  if (k_eff < k) {
    res.rank_deficient = true;
    logf(LogLevel::info, "pca: only %d of %d requested components have nonzero variance", k_eff,
         k);
  }
  if (k_eff == 0) raise(Err::empty_matrix, "pca input has zero variance");

  res.components = ad::Tensor<double>(d, static_cast<size_t>(k_eff));
  res.explained_ratio.resize(static_cast<size_t>(k_eff));
  for (int c = 0; c < k_eff; ++c) {
    size_t src = order[static_cast<size_t>(c)];
    // sign convention: the largest-magnitude coordinate is positive
    size_t arg = 0;
    double best = 0.0;
    for (size_t j = 0; j < d; ++j) {
      double v = std::abs(eigvecs[j * d + src]);
      if (v > best) {
        best = v;
        arg = j;
      }
    }
    double sign = eigvecs[arg * d + src] >= 0.0 ? 1.0 : -1.0;
    for (size_t j = 0; j < d; ++j)
      res.components.at(j, static_cast<size_t>(c)) = sign * eigvecs[j * d + src];
    res.explained_ratio[static_cast<size_t>(c)] =
        total_var > 0.0 ? std::max(eigvals[src], 0.0) / total_var : 0.0;
  }

  res.projected = ad::Tensor<double>(N, static_cast<size_t>(k_eff));
  for (size_t i = 0; i < N; ++i)
    for (int c = 0; c < k_eff; ++c) {
      double acc = 0.0;
      for (size_t j = 0; j < d; ++j)
        acc += centered.at(i, j) * res.components.at(j, static_cast<size_t>(c));
      res.projected.at(i, static_cast<size_t>(c)) = acc;
    }
  return res;
}

}  // namespace famh::eval
