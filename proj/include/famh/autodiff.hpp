#pragma once
// Reverse-mode differentiation over a recorded graph of tensor operations.
// Node creation order is the topological order, so backward is a single
// reverse sweep. Tensors are row-major matrices; scalars are 1x1.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "famh/common.hpp"
#include "famh/spectral.hpp"

namespace famh::ad {

template <class T>
struct Tensor {
  size_t rows = 0;
  size_t cols = 0;
  std::vector<T> v;

  Tensor() = default;
  Tensor(size_t r, size_t c, T fill = T(0)) : rows(r), cols(c), v(r * c, fill) {}

  static Tensor zeros(size_t r, size_t c) { return Tensor(r, c); }

  size_t size() const { return rows * cols; }
  T& at(size_t r, size_t c) { return v[r * cols + c]; }
  T at(size_t r, size_t c) const { return v[r * cols + c]; }
  T* row(size_t r) { return v.data() + r * cols; }
  const T* row(size_t r) const { return v.data() + r * cols; }

  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

  bool all_finite() const {
    for (T x : v)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }
};

// Rotates consecutive pairs of one head vector in place by pos * theta_k with
// theta_k = base^(-2k/d_head).
template <class T>
void rope_rotate(std::span<T> head_vec, long long pos, double base) {
  const size_t d = head_vec.size();
  if (d % 2 != 0) raise(Err::odd_dim, "rope needs an even per-head dimension");
  for (size_t k = 0; 2 * k < d; ++k) {
    double theta = static_cast<double>(pos) * std::pow(base, -2.0 * static_cast<double>(k) / static_cast<double>(d));
    T c = static_cast<T>(std::cos(theta));
    T s = static_cast<T>(std::sin(theta));
    T v0 = head_vec[2 * k];
    T v1 = head_vec[2 * k + 1];
    head_vec[2 * k] = v0 * c - v1 * s;
    head_vec[2 * k + 1] = v0 * s + v1 * c;
  }
}

enum class Op : uint8_t {
  leaf,
  matmul,
  add,       // same shape
  add_row,   // broadcast a 1 x c row onto every row
  scale,
  mul,       // elementwise
  silu,
  rmsnorm,   // row-wise, with gain
  rope,      // rotary embedding across heads, positions in aux_pos
  mh_scores, // per-head Q K^T / sqrt(d_head), stacked (heads*L) x L
  softmax,   // row-wise
  mh_mix,    // per-head P V, back to L x d
  mask_rows, // replace masked rows with a learnable token row
  spectral_loss,
  ce_loss,
};

template <class T>
class Tape {
 public:
  int leaf(Tensor<T> t, bool requires_grad = false) {
    Node n;
    n.op = Op::leaf;
    n.value = std::move(t);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  int matmul(int a, int b) {
    const auto& A = value(a);
    const auto& B = value(b);
    if (A.cols != B.rows) raise(Err::shape_mismatch, "matmul inner dimensions differ");
    Tensor<T> C(A.rows, B.cols);
    for (size_t i = 0; i < A.rows; ++i) {
      const T* arow = A.row(i);
      T* crow = C.row(i);
      for (size_t k = 0; k < A.cols; ++k) {
        T av = arow[k];
        if (av == T(0)) continue;
        const T* brow = B.row(k);
        for (size_t j = 0; j < B.cols; ++j) crow[j] += av * brow[j];
      }
    }
    return push(Op::matmul, std::move(C), a, b);
  }

  int add(int a, int b) {
    const auto& A = value(a);
    const auto& B = value(b);
    if (!A.same_shape(B)) raise(Err::shape_mismatch, "add shapes differ");
    Tensor<T> C = A;
    for (size_t i = 0; i < C.size(); ++i) C.v[i] += B.v[i];
    return push(Op::add, std::move(C), a, b);
  }

  int add_row(int a, int bias) {
    const auto& A = value(a);
    const auto& B = value(bias);
    if (B.rows != 1 || B.cols != A.cols) raise(Err::shape_mismatch, "bias must be 1 x cols");
    Tensor<T> C = A;
    for (size_t i = 0; i < C.rows; ++i) {
      T* crow = C.row(i);
      for (size_t j = 0; j < C.cols; ++j) crow[j] += B.v[j];
    }
    return push(Op::add_row, std::move(C), a, bias);
  }

  int scale(int a, T s) {
    Tensor<T> C = value(a);
    for (auto& x : C.v) x *= s;
    int id = push(Op::scale, std::move(C), a);
    nodes_[static_cast<size_t>(id)].scalar = s;
    return id;
  }

  int mul(int a, int b) {
    const auto& A = value(a);
    const auto& B = value(b);
    if (!A.same_shape(B)) raise(Err::shape_mismatch, "mul shapes differ");
    Tensor<T> C = A;
    for (size_t i = 0; i < C.size(); ++i) C.v[i] *= B.v[i];
    return push(Op::mul, std::move(C), a, b);
  }

  int silu(int a) {
    Tensor<T> C = value(a);
    for (auto& x : C.v) {
      T sig = T(1) / (T(1) + std::exp(-x));
      x = x * sig;
    }
    return push(Op::silu, std::move(C), a);
  }

  int rmsnorm(int a, int gain, T eps) {
    const auto& A = value(a);
    const auto& G = value(gain);
    if (G.rows != 1 || G.cols != A.cols) raise(Err::shape_mismatch, "rmsnorm gain must be 1 x cols");
    Tensor<T> C(A.rows, A.cols);
    for (size_t i = 0; i < A.rows; ++i) {
      const T* x = A.row(i);
      T* y = C.row(i);
      T ms = 0;
      for (size_t j = 0; j < A.cols; ++j) ms += x[j] * x[j];
      ms /= static_cast<T>(A.cols);
      T r = T(1) / std::sqrt(ms + eps);
      for (size_t j = 0; j < A.cols; ++j) y[j] = x[j] * r * G.v[j];
    }
    int id = push(Op::rmsnorm, std::move(C), a, gain);
    nodes_[static_cast<size_t>(id)].scalar = eps;
    return id;
  }

  int rope(int a, int n_heads, const std::vector<long long>& positions, T base) {
    const auto& A = value(a);
    if (A.rows != positions.size()) raise(Err::shape_mismatch, "rope positions do not match rows");
    if (n_heads <= 0 || A.cols % static_cast<size_t>(n_heads) != 0)
      raise(Err::shape_mismatch, "rope head count does not divide width");
    size_t dh = A.cols / static_cast<size_t>(n_heads);
    if (dh % 2 != 0) raise(Err::odd_dim, "rope needs an even per-head dimension");
    Tensor<T> C = A;
    for (size_t i = 0; i < C.rows; ++i)
      for (int h = 0; h < n_heads; ++h)
        rope_rotate<T>({C.row(i) + static_cast<size_t>(h) * dh, dh}, positions[i],
                       static_cast<double>(base));
    int id = push(Op::rope, std::move(C), a);
    auto& n = nodes_[static_cast<size_t>(id)];
    n.heads = n_heads;
    n.scalar = base;
    n.positions = positions;
    return id;
  }

  int mh_scores(int q, int k, int n_heads) {
    const auto& Q = value(q);
    const auto& K = value(k);
    if (!Q.same_shape(K)) raise(Err::shape_mismatch, "mh_scores Q/K shapes differ");
    if (Q.cols % static_cast<size_t>(n_heads) != 0)
      raise(Err::shape_mismatch, "head count does not divide width");
    const size_t L = Q.rows;
    const size_t dh = Q.cols / static_cast<size_t>(n_heads);
    const T inv = T(1) / std::sqrt(static_cast<T>(dh));
    Tensor<T> S(static_cast<size_t>(n_heads) * L, L);
    for (int h = 0; h < n_heads; ++h) {
      size_t off = static_cast<size_t>(h) * dh;
      for (size_t i = 0; i < L; ++i) {
        const T* qi = Q.row(i) + off;
        T* srow = S.row(static_cast<size_t>(h) * L + i);
        for (size_t j = 0; j < L; ++j) {
          const T* kj = K.row(j) + off;
          T acc = 0;
          for (size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
          srow[j] = acc * inv;
        }
      }
    }
    int id = push(Op::mh_scores, std::move(S), q, k);
    nodes_[static_cast<size_t>(id)].heads = n_heads;
    return id;
  }

  int softmax(int a) {
    Tensor<T> C = value(a);
    for (size_t i = 0; i < C.rows; ++i) {
      T* row = C.row(i);
      T mx = row[0];
      for (size_t j = 1; j < C.cols; ++j) mx = std::max(mx, row[j]);
      T sum = 0;
      for (size_t j = 0; j < C.cols; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
      }
      for (size_t j = 0; j < C.cols; ++j) row[j] /= sum;
    }
    return push(Op::softmax, std::move(C), a);
  }

  int mh_mix(int p, int v, int n_heads) {
    const auto& P = value(p);
    const auto& V = value(v);
    const size_t L = V.rows;
    if (P.rows != static_cast<size_t>(n_heads) * L || P.cols != L)
      raise(Err::shape_mismatch, "mh_mix attention shape mismatch");
    const size_t dh = V.cols / static_cast<size_t>(n_heads);
    Tensor<T> Y(L, V.cols);
    for (int h = 0; h < n_heads; ++h) {
      size_t off = static_cast<size_t>(h) * dh;
      for (size_t i = 0; i < L; ++i) {
        const T* prow = P.row(static_cast<size_t>(h) * L + i);
        T* yrow = Y.row(i) + off;
        for (size_t j = 0; j < L; ++j) {
          T pv = prow[j];
          if (pv == T(0)) continue;
          const T* vrow = V.row(j) + off;
          for (size_t c = 0; c < dh; ++c) yrow[c] += pv * vrow[c];
        }
      }
    }
    int id = push(Op::mh_mix, std::move(Y), p, v);
    nodes_[static_cast<size_t>(id)].heads = n_heads;
    return id;
  }

  int mask_rows(int a, int token, const std::vector<uint8_t>& mask) {
    const auto& A = value(a);
    const auto& M = value(token);
    if (M.rows != 1 || M.cols != A.cols) raise(Err::shape_mismatch, "mask token must be 1 x cols");
    if (mask.size() != A.rows) raise(Err::shape_mismatch, "mask length does not match rows");
    Tensor<T> C = A;
    for (size_t i = 0; i < C.rows; ++i)
      if (mask[i])
        for (size_t j = 0; j < C.cols; ++j) C.at(i, j) = M.v[j];
    int id = push(Op::mask_rows, std::move(C), a, token);
    nodes_[static_cast<size_t>(id)].mask = mask;
    return id;
  }

  // Masked spectral reconstruction loss against a constant target window
  // (patch rows of 3*patch_len). Produces a scalar.
  int spectral_loss(int recon, Tensor<T> target, const std::vector<uint8_t>& mask,
                    const spectral::LossWeights& w, const spectral::SpectralConfig& cfg,
                    int patch_len, spectral::LossComponents* comps = nullptr,
                    bool want_components = false) {
    const auto& R = value(recon);
    if (!R.same_shape(target)) raise(Err::shape_mismatch, "reconstruction/target shapes differ");
    if (R.cols != static_cast<size_t>(3 * patch_len))
      raise(Err::shape_mismatch, "patch rows must hold 3*patch_len values");
    T loss = spectral::masked_aggregate<T>(target.v.data(), R.v.data(),
                                           static_cast<int>(R.rows), patch_len, mask, w, cfg,
                                           comps, want_components);
    Tensor<T> out(1, 1);
    out.v[0] = loss;
    int id = push(Op::spectral_loss, std::move(out), recon);
    auto& n = nodes_[static_cast<size_t>(id)];
    n.target = std::move(target);
    n.mask = mask;
    n.weights = w;
    n.scfg = cfg;
    n.patch_len = patch_len;
    return id;
  }

  // Weighted cross-entropy over logit rows; labels equal to `missing` are
  // skipped; mean over the labeled rows.
  int ce_loss(int logits, const std::vector<int>& labels, const std::vector<T>& class_w,
              int missing) {
    const auto& Z = value(logits);
    if (labels.size() != Z.rows) raise(Err::shape_mismatch, "label count does not match rows");
    if (class_w.size() != Z.cols) raise(Err::shape_mismatch, "class weight count does not match");
    size_t labeled = 0;
    T total = 0;
    for (size_t i = 0; i < Z.rows; ++i) {
      int y = labels[i];
      if (y == missing) continue;
      if (y < 0 || static_cast<size_t>(y) >= Z.cols)
        raise(Err::shape_mismatch, "label index out of range");
      ++labeled;
      const T* row = Z.row(i);
      T mx = row[0];
      for (size_t j = 1; j < Z.cols; ++j) mx = std::max(mx, row[j]);
      T sum = 0;
      for (size_t j = 0; j < Z.cols; ++j) sum += std::exp(row[j] - mx);
      T logp = row[static_cast<size_t>(y)] - mx - std::log(sum);
      total -= class_w[static_cast<size_t>(y)] * logp;
    }
    if (labeled == 0) raise(Err::all_labels_missing, "no labeled patches for cross-entropy");
    Tensor<T> out(1, 1);
    out.v[0] = total / static_cast<T>(labeled);
    int id = push(Op::ce_loss, std::move(out), logits);
    auto& n = nodes_[static_cast<size_t>(id)];
    n.labels = labels;
    n.class_w = class_w;
    n.missing = missing;
    return id;
  }

  const Tensor<T>& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }

  const Tensor<T>& grad(int id) const { return nodes_[static_cast<size_t>(id)].grad; }

  bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

  void backward(int loss) {
    auto& out = nodes_[static_cast<size_t>(loss)];
    if (out.value.rows != 1 || out.value.cols != 1)
      raise(Err::non_scalar_output, "backward needs a scalar output");
    for (auto& n : nodes_) n.grad = Tensor<T>();
    out.grad = Tensor<T>(1, 1, T(1));
    for (int id = loss; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (!n.requires_grad || n.op == Op::leaf || n.grad.size() == 0) continue;
      step_backward(n);
    }
  }

  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Op op = Op::leaf;
    int a = -1;
    int b = -1;
    bool requires_grad = false;
    Tensor<T> value;
    Tensor<T> grad;
    // op-specific payloads
    T scalar = T(0);
    int heads = 0;
    int patch_len = 0;
    int missing = -1;
    std::vector<long long> positions;
    std::vector<uint8_t> mask;
    std::vector<int> labels;
    std::vector<T> class_w;
    Tensor<T> target;
    spectral::LossWeights weights;
    spectral::SpectralConfig scfg;
  };

  int push(Op op, Tensor<T> val, int a, int b = -1) {
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.requires_grad = nodes_[static_cast<size_t>(a)].requires_grad ||
                      (b >= 0 && nodes_[static_cast<size_t>(b)].requires_grad);
    n.value = std::move(val);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  Tensor<T>& grad_buf(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.size() == 0) n.grad = Tensor<T>(n.value.rows, n.value.cols);
    return n.grad;
  }

  bool wants(int id) const { return id >= 0 && nodes_[static_cast<size_t>(id)].requires_grad; }

  void step_backward(Node& n) {
    const Tensor<T>& g = n.grad;
    switch (n.op) {
      case Op::matmul: {
        const auto& A = value(n.a);
        const auto& B = value(n.b);
        if (wants(n.a)) {
          auto& dA = grad_buf(n.a);
          for (size_t i = 0; i < A.rows; ++i)
            for (size_t k = 0; k < A.cols; ++k) {
              const T* grow = g.row(i);
              const T* brow = B.row(k);
              T acc = 0;
              for (size_t j = 0; j < B.cols; ++j) acc += grow[j] * brow[j];
              dA.at(i, k) += acc;
            }
        }
        if (wants(n.b)) {
          auto& dB = grad_buf(n.b);
          for (size_t i = 0; i < A.rows; ++i) {
            const T* arow = A.row(i);
            const T* grow = g.row(i);
            for (size_t k = 0; k < A.cols; ++k) {
              T av = arow[k];
              if (av == T(0)) continue;
              T* drow = dB.row(k);
              for (size_t j = 0; j < B.cols; ++j) drow[j] += av * grow[j];
            }
          }
        }
        break;
      }
      case Op::add: {
        for (int src : {n.a, n.b})
          if (wants(src)) {
            auto& d = grad_buf(src);
            for (size_t i = 0; i < g.size(); ++i) d.v[i] += g.v[i];
          }
        break;
      }
      case Op::add_row: {
        if (wants(n.a)) {
          auto& d = grad_buf(n.a);
          for (size_t i = 0; i < g.size(); ++i) d.v[i] += g.v[i];
        }
        if (wants(n.b)) {
          auto& d = grad_buf(n.b);
          for (size_t i = 0; i < g.rows; ++i) {
            const T* grow = g.row(i);
            for (size_t j = 0; j < g.cols; ++j) d.v[j] += grow[j];
          }
        }
        break;
      }
      case Op::scale: {
        if (wants(n.a)) {
          auto& d = grad_buf(n.a);
          for (size_t i = 0; i < g.size(); ++i) d.v[i] += g.v[i] * n.scalar;
        }
        break;
      }
      case Op::mul: {
        const auto& A = value(n.a);
        const auto& B = value(n.b);
        if (wants(n.a)) {
          auto& d = grad_buf(n.a);
          for (size_t i = 0; i < g.size(); ++i) d.v[i] += g.v[i] * B.v[i];
        }
        if (wants(n.b)) {
          auto& d = grad_buf(n.b);
          for (size_t i = 0; i < g.size(); ++i) d.v[i] += g.v[i] * A.v[i];
        }
        break;
      }
      case Op::silu: {
        if (wants(n.a)) {
          const auto& X = value(n.a);
          auto& d = grad_buf(n.a);
          for (size_t i = 0; i < g.size(); ++i) {
            T x = X.v[i];
            T sig = T(1) / (T(1) + std::exp(-x));
            d.v[i] += g.v[i] * sig * (T(1) + x * (T(1) - sig));
          }
        }
        break;
      }
      case Op::rmsnorm: {
        const auto& X = value(n.a);
        const auto& G = value(n.b);
        const size_t c = X.cols;
        for (size_t i = 0; i < X.rows; ++i) {
          const T* x = X.row(i);
          const T* gr = g.row(i);
          T ms = 0;
          for (size_t j = 0; j < c; ++j) ms += x[j] * x[j];
          ms /= static_cast<T>(c);
          T r = T(1) / std::sqrt(ms + n.scalar);
          if (wants(n.a)) {
            T dot = 0;
            for (size_t j = 0; j < c; ++j) dot += gr[j] * G.v[j] * x[j];
            T k = dot * r * r * r / static_cast<T>(c);
            T* d = grad_buf(n.a).row(i);
            for (size_t j = 0; j < c; ++j) d[j] += gr[j] * G.v[j] * r - x[j] * k;
          }
          if (wants(n.b)) {
            T* d = grad_buf(n.b).row(0);
            for (size_t j = 0; j < c; ++j) d[j] += gr[j] * x[j] * r;
          }
        }
        break;
      }
      case Op::rope: {
        if (wants(n.a)) {
          auto& d = grad_buf(n.a);
          const size_t dh = g.cols / static_cast<size_t>(n.heads);
          for (size_t i = 0; i < g.rows; ++i) {
            for (int h = 0; h < n.heads; ++h) {
              const T* gr = g.row(i) + static_cast<size_t>(h) * dh;
              T* dr = d.row(i) + static_cast<size_t>(h) * dh;
              for (size_t k = 0; 2 * k < dh; ++k) {
                double theta = static_cast<double>(n.positions[i]) *
                               std::pow(static_cast<double>(n.scalar),
                                        -2.0 * static_cast<double>(k) / static_cast<double>(dh));
                T cth = static_cast<T>(std::cos(theta));
                T sth = static_cast<T>(std::sin(theta));
                // adjoint of a rotation is the inverse rotation
                dr[2 * k] += gr[2 * k] * cth + gr[2 * k + 1] * sth;
                dr[2 * k + 1] += -gr[2 * k] * sth + gr[2 * k + 1] * cth;
              }
            }
          }
        }
        break;
      }
      case Op::mh_scores: {
        const auto& Q = value(n.a);
        const auto& K = value(n.b);
        const size_t L = Q.rows;
        const size_t dh = Q.cols / static_cast<size_t>(n.heads);
        const T inv = T(1) / std::sqrt(static_cast<T>(dh));
        for (int h = 0; h < n.heads; ++h) {
          size_t off = static_cast<size_t>(h) * dh;
          for (size_t i = 0; i < L; ++i) {
            const T* grow = g.row(static_cast<size_t>(h) * L + i);
            if (wants(n.a)) {
              T* dq = grad_buf(n.a).row(i) + off;
              for (size_t j = 0; j < L; ++j) {
                T gv = grow[j] * inv;
                if (gv == T(0)) continue;
                const T* kj = K.row(j) + off;
                for (size_t c = 0; c < dh; ++c) dq[c] += gv * kj[c];
              }
            }
            if (wants(n.b)) {
              const T* qi = Q.row(i) + off;
              for (size_t j = 0; j < L; ++j) {
                T gv = grow[j] * inv;
                if (gv == T(0)) continue;
                T* dk = grad_buf(n.b).row(j) + off;
                for (size_t c = 0; c < dh; ++c) dk[c] += gv * qi[c];
              }
            }
          }
        }
        break;
      }
      case Op::softmax: {
        if (wants(n.a)) {
          const auto& P = n.value;
          auto& d = grad_buf(n.a);
          for (size_t i = 0; i < P.rows; ++i) {
            const T* p = P.row(i);
            const T* gr = g.row(i);
            T dot = 0;
            for (size_t j = 0; j < P.cols; ++j) dot += gr[j] * p[j];
            T* dr = d.row(i);
            for (size_t j = 0; j < P.cols; ++j) dr[j] += p[j] * (gr[j] - dot);
          }
        }
        break;
      }
      case Op::mh_mix: {
        const auto& P = value(n.a);
        const auto& V = value(n.b);
        const size_t L = V.rows;
        const size_t dh = V.cols / static_cast<size_t>(n.heads);
        for (int h = 0; h < n.heads; ++h) {
          size_t off = static_cast<size_t>(h) * dh;
          for (size_t i = 0; i < L; ++i) {
            const T* grow = g.row(i) + off;
            if (wants(n.a)) {
              T* dp = grad_buf(n.a).row(static_cast<size_t>(h) * L + i);
              for (size_t j = 0; j < L; ++j) {
                const T* vrow = V.row(j) + off;
                T acc = 0;
                for (size_t c = 0; c < dh; ++c) acc += grow[c] * vrow[c];
                dp[j] += acc;
              }
            }
            if (wants(n.b)) {
              const T* prow = P.row(static_cast<size_t>(h) * L + i);
              for (size_t j = 0; j < L; ++j) {
                T pv = prow[j];
                if (pv == T(0)) continue;
                T* dv = grad_buf(n.b).row(j) + off;
                for (size_t c = 0; c < dh; ++c) dv[c] += pv * grow[c];
              }
            }
          }
        }
        break;
      }
      case Op::mask_rows: {
        if (wants(n.a)) {
          auto& d = grad_buf(n.a);
          for (size_t i = 0; i < g.rows; ++i) {
            if (n.mask[i]) continue;
            const T* gr = g.row(i);
            T* dr = d.row(i);
            for (size_t j = 0; j < g.cols; ++j) dr[j] += gr[j];
          }
        }
        if (wants(n.b)) {
          auto& d = grad_buf(n.b);
          for (size_t i = 0; i < g.rows; ++i) {
            if (!n.mask[i]) continue;
            const T* gr = g.row(i);
            for (size_t j = 0; j < g.cols; ++j) d.v[j] += gr[j];
          }
        }
        break;
      }
      case Op::spectral_loss: {
        if (wants(n.a)) {
          const auto& R = value(n.a);
          auto& d = grad_buf(n.a);
          spectral::masked_aggregate_grad<T>(n.target.v.data(), R.v.data(),
                                             static_cast<int>(R.rows), n.patch_len, n.mask,
                                             n.weights, n.scfg, d.v.data(), g.v[0]);
        }
        break;
      }
      case Op::ce_loss: {
        if (wants(n.a)) {
          const auto& Z = value(n.a);
          auto& d = grad_buf(n.a);
          size_t labeled = 0;
          for (int y : n.labels) labeled += (y != n.missing) ? 1 : 0;
          const T k = g.v[0] / static_cast<T>(labeled);
          for (size_t i = 0; i < Z.rows; ++i) {
            int y = n.labels[i];
            if (y == n.missing) continue;
            const T* row = Z.row(i);
            T mx = row[0];
            for (size_t j = 1; j < Z.cols; ++j) mx = std::max(mx, row[j]);
            T sum = 0;
            for (size_t j = 0; j < Z.cols; ++j) sum += std::exp(row[j] - mx);
            T wy = n.class_w[static_cast<size_t>(y)];
            T* dr = d.row(i);
            for (size_t j = 0; j < Z.cols; ++j) {
              T p = std::exp(row[j] - mx) / sum;
              dr[j] += k * wy * (p - (static_cast<int>(j) == y ? T(1) : T(0)));
            }
          }
        }
        break;
      }
      case Op::leaf:
        break;
    }
  }

  std::vector<Node> nodes_;
};

}  // namespace famh::ad
