#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "deepformer/errors.hpp"
#include "deepformer/rng.hpp"
#include "deepformer/tensor.hpp"
#include "deepformer/threadpool.hpp"

namespace deepformer {

// Trainable weight. Gradients accumulate across backward calls until the
// owner zeroes them (start of each accumulation window).
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape) {}

  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), T(0)); }
};

using NodeId = uint32_t;

namespace detail {

// C[M,N] (+)= A[M,K] * B[K,N], row-major. Rows are independent, so the row
// partition handed to the pool cannot change any result bit.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, size_t m, size_t k, size_t n,
             bool accumulate) {
  auto rows = [=](size_t r0, size_t r1) {
    for (size_t i = r0; i < r1; ++i) {
      T* crow = c + i * n;
      if (!accumulate) std::fill(crow, crow + n, T(0));
      const T* arow = a + i * k;
      for (size_t p = 0; p < k; ++p) {
        T aik = arow[p];
        const T* brow = b + p * n;
        for (size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
      }
    }
  };
  size_t flops = m * n * k;
  if (flops >= (1u << 16) && global_pool().size() > 1) {
    global_pool().parallel_for(m, rows);
  } else {
    rows(0, m);
  }
}

// scratch transpose: out[N,K] = in[K,N]
template <typename T>
void transpose2d(const T* in, T* out, size_t k, size_t n) {
  for (size_t i = 0; i < k; ++i)
    for (size_t j = 0; j < n; ++j) out[j * k + i] = in[i * n + j];
}

template <typename T>
std::vector<T>& scratch() {
  static thread_local std::vector<T> buf;
  return buf;
}

}  // namespace detail

// Reverse-mode autodiff tape. Nodes are appended in topological order during
// the forward pass; backward() walks them in exact reverse order. A tape
// built with record=false computes values only (inference / finite
// differences) and cannot run backward.
template <typename T>
class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}

  bool recording() const { return record_; }
  size_t size() const { return nodes_.size(); }

  void clear() {
    nodes_.clear();
    backward_done_ = false;
  }

  NodeId leaf(Parameter<T>& p) {
    Node node;
    node.param = &p;
    return push(std::move(node));
  }

  NodeId constant(Tensor<T> v) {
    Node node;
    node.value = std::move(v);
    return push(std::move(node));
  }

  const Tensor<T>& value(NodeId id) const {
    const Node& n = nodes_[id];
    return n.param ? n.param->value : n.value;
  }

  // Gradient of an interior node; zeros if backward never reached it.
  const Tensor<T>& grad(NodeId id) {
    Node& n = nodes_[id];
    if (n.param) return n.param->grad;
    if (n.grad.numel() == 0) n.grad = Tensor<T>(value(id).shape);
    return n.grad;
  }

  // ---- ops -----------------------------------------------------------

  // a [.., p, q] x b: b 2-d [q, r] broadcasts over a's leading dims; else
  // same ndim with equal leading dims. trans_b contracts b's last dim.
  NodeId matmul(NodeId a, NodeId b, bool trans_b = false) {
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    if (av.ndim() < 2 || bv.ndim() < 2) {
      throw ShapeError("matmul needs 2-d operands, got " +
                       shape_string(av.shape) + " x " + shape_string(bv.shape));
    }
    size_t p = av.shape[av.ndim() - 2];
    size_t q = av.shape[av.ndim() - 1];
    size_t bq = trans_b ? bv.shape[bv.ndim() - 1] : bv.shape[bv.ndim() - 2];
    size_t r = trans_b ? bv.shape[bv.ndim() - 2] : bv.shape[bv.ndim() - 1];
    if (q != bq) {
      throw ShapeError("matmul inner extents differ: " + shape_string(av.shape) +
                       (trans_b ? " x transposed " : " x ") + shape_string(bv.shape));
    }
    bool b_broadcast = bv.ndim() == 2 && av.ndim() >= 2;
    if (!b_broadcast) {
      if (av.ndim() != bv.ndim() ||
          !std::equal(av.shape.begin(), av.shape.end() - 2, bv.shape.begin())) {
        throw ShapeError("matmul batch extents differ: " + shape_string(av.shape) +
                         " x " + shape_string(bv.shape));
      }
    }
    Shape out_shape(av.shape.begin(), av.shape.end() - 1);
    out_shape.push_back(r);
    Tensor<T> out(out_shape);

    size_t slices = b_broadcast ? 1 : av.numel() / (p * q);
    size_t m = b_broadcast ? av.numel() / q : p;
    const T* bd = bv.data.data();
    for (size_t s = 0; s < slices; ++s) {
      const T* as = av.data.data() + s * m * q;
      const T* bs = b_broadcast ? bd : bd + s * (q * r);
      T* cs = out.data.data() + s * m * r;
      if (!trans_b) {
        detail::gemm_nn(as, bs, cs, m, q, r, false);
      } else {
        auto& buf = detail::scratch<T>();
        buf.resize(q * r);
        detail::transpose2d(bs, buf.data(), r, q);  // b slice is [r, q]
        detail::gemm_nn(as, buf.data(), cs, m, q, r, false);
      }
    }
    NodeId id = push_value(std::move(out));
    if (record_) {
      nodes_[id].backward = [a, b, trans_b, q, r, b_broadcast, slices,
                             m](Tape& t) {
        const Tensor<T>& av = t.value(a);
        const Tensor<T>& bv = t.value(b);
        const Tensor<T>& g = t.nodes_[t.current_].grad;
        auto& buf = detail::scratch<T>();
        Tensor<T>& da = t.grad_ref(a);
        Tensor<T>& db = t.grad_ref(b);
        for (size_t s = 0; s < slices; ++s) {
          const T* as = av.data.data() + s * m * q;
          const T* bs = bv.data.data() + (b_broadcast ? 0 : s * q * r);
          const T* gs = g.data.data() + s * m * r;
          T* das = da.data.data() + s * m * q;
          T* dbs = db.data.data() + (b_broadcast ? 0 : s * q * r);
          if (!trans_b) {
            // dA += G * B^T ; dB += A^T * G
            buf.resize(r * q);
            detail::transpose2d(bs, buf.data(), q, r);
            detail::gemm_nn(gs, buf.data(), das, m, r, q, true);
            std::vector<T> at(q * m);
            detail::transpose2d(as, at.data(), m, q);
            detail::gemm_nn(at.data(), gs, dbs, q, m, r, true);
          } else {
            // C = A * B^T with B [r, q]: dA += G * B ; dB += G^T * A
            detail::gemm_nn(gs, bs, das, m, r, q, true);
            std::vector<T> gt(r * m);
            detail::transpose2d(gs, gt.data(), m, r);
            detail::gemm_nn(gt.data(), as, dbs, r, m, q, true);
          }
        }
      };
      nodes_[id].inputs = {a, b};
    }
    return id;
  }

  NodeId add(NodeId a, NodeId b) {
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    if (!av.same_shape(bv)) {
      throw ShapeError("add shapes differ: " + shape_string(av.shape) + " vs " +
                       shape_string(bv.shape));
    }
    Tensor<T> out(av.shape);
    for (size_t i = 0; i < out.numel(); ++i) out[i] = av[i] + bv[i];
    NodeId id = push_value(std::move(out));
    if (record_) {
      nodes_[id].backward = [a, b](Tape& t) {
        const Tensor<T>& g = t.nodes_[t.current_].grad;
        Tensor<T>& da = t.grad_ref(a);
        Tensor<T>& db = t.grad_ref(b);
        for (size_t i = 0; i < g.numel(); ++i) {
          da[i] += g[i];
          db[i] += g[i];
        }
      };
      nodes_[id].inputs = {a, b};
    }
    return id;
  }

  NodeId mul(NodeId a, NodeId b) {
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    if (!av.same_shape(bv)) {
      throw ShapeError("mul shapes differ: " + shape_string(av.shape) + " vs " +
                       shape_string(bv.shape));
    }
    Tensor<T> out(av.shape);
    for (size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
    NodeId id = push_value(std::move(out));
    if (record_) {
      nodes_[id].backward = [a, b](Tape& t) {
        const Tensor<T>& g = t.nodes_[t.current_].grad;
        const Tensor<T>& av = t.value(a);
        const Tensor<T>& bv = t.value(b);
        Tensor<T>& da = t.grad_ref(a);
        Tensor<T>& db = t.grad_ref(b);
        for (size_t i = 0; i < g.numel(); ++i) {
          da[i] += g[i] * bv[i];
          db[i] += g[i] * av[i];
        }
      };
      nodes_[id].inputs = {a, b};
    }
    return id;
  }

  // broadcast bias [d] over the rows of a [.., d]
  NodeId add_bias(NodeId a, NodeId bias) {
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(bias);
    size_t d = av.last_dim();
    if (bv.ndim() != 1 || bv.shape[0] != d) {
      throw ShapeError("add_bias: bias " + shape_string(bv.shape) +
                       " does not match last dim of " + shape_string(av.shape));
    }
    Tensor<T> out(av.shape);
    size_t rows = av.rows();
    for (size_t i = 0; i < rows; ++i)
      for (size_t j = 0; j < d; ++j) out[i * d + j] = av[i * d + j] + bv[j];
    NodeId id = push_value(std::move(out));
    if (record_) {
      nodes_[id].backward = [a, bias, rows, d](Tape& t) {
        const Tensor<T>& g = t.nodes_[t.current_].grad;
        Tensor<T>& da = t.grad_ref(a);
        Tensor<T>& db = t.grad_ref(bias);
        for (size_t i = 0; i < rows; ++i)
          for (size_t j = 0; j < d; ++j) {
            da[i * d + j] += g[i * d + j];
            db[j] += g[i * d + j];
          }
      };
      nodes_[id].inputs = {a, bias};
    }
    return id;
  }

  // elementwise multiply by a constant per-feature vector (broadcast over rows)
  NodeId mul_lastdim(NodeId a, const Tensor<T>& vec) {
    const Tensor<T>& av = value(a);
    size_t d = av.last_dim();
    if (vec.ndim() != 1 || vec.shape[0] != d) {
      throw ShapeError("mul_lastdim: vector " + shape_string(vec.shape) +
                       " does not match last dim of " + shape_string(av.shape));
    }
    Tensor<T> out(av.shape);
    size_t rows = av.rows();
    for (size_t i = 0; i < rows; ++i)
      for (size_t j = 0; j < d; ++j) out[i * d + j] = av[i * d + j] * vec[j];
    NodeId id = push_value(std::move(out));
    if (record_) {
      Tensor<T> saved = vec;
      nodes_[id].backward = [a, rows, d, saved = std::move(saved)](Tape& t) {
        const Tensor<T>& g = t.nodes_[t.current_].grad;
        Tensor<T>& da = t.grad_ref(a);
        for (size_t i = 0; i < rows; ++i)
          for (size_t j = 0; j < d; ++j) da[i * d + j] += g[i * d + j] * saved[j];
      };
      nodes_[id].inputs = {a};
    }
    return id;
  }

  NodeId scale(NodeId a, T c) {
    const Tensor<T>& av = value(a);
    Tensor<T> out(av.shape);
    for (size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * c;
    NodeId id = push_value(std::move(out));
    if (record_) {
      nodes_[id].backward = [a, c](Tape& t) {
        const Tensor<T>& g = t.nodes_[t.current_].grad;
        Tensor<T>& da = t.grad_ref(a);
        for (size_t i = 0; i < g.numel(); ++i) da[i] += g[i] * c;
      };
      nodes_[id].inputs = {a};
    }
    return id;
  }

  NodeId relu(NodeId a) {
    const Tensor<T>& av = value(a);
    Tensor<T> out(av.shape);
    for (size_t i = 0; i < out.numel(); ++i) out[i] = av[i] > T(0) ? av[i] : T(0);
    NodeId id = push_value(std::move(out));
    if (record_) {
      nodes_[id].backward = [a](Tape& t) {
        const Tensor<T>& g = t.nodes_[t.current_].grad;
        const Tensor<T>& av = t.value(a);
        Tensor<T>& da = t.grad_ref(a);
        for (size_t i = 0; i < g.numel(); ++i)
          if (av[i] > T(0)) da[i] += g[i];
      };
      nodes_[id].inputs = {a};
    }
    return id;
  }

  // numerically stable softmax along the last axis
  NodeId softmax_lastdim(NodeId a) {
    const Tensor<T>& av = value(a);
    size_t d = av.last_dim();
    size_t rows = av.rows();
    Tensor<T> out(av.shape);
    for (size_t i = 0; i < rows; ++i) {
      const T* x = av.data.data() + i * d;
      T* y = out.data.data() + i * d;
      double mx = -std::numeric_limits<double>::infinity();
      bool has_nan = false;
      for (size_t j = 0; j < d; ++j) {
        double xd = static_cast<double>(x[j]);
        if (std::isnan(xd)) has_nan = true;
        mx = std::max(mx, xd);
      }
      if (has_nan) {
        // numerical failure upstream; propagate instead of masking it
        for (size_t j = 0; j < d; ++j) y[j] = std::numeric_limits<T>::quiet_NaN();
        continue;
      }
      if (!(mx > -std::numeric_limits<double>::infinity())) {
        throw ContractError("softmax row " + std::to_string(i) +
                            " has no finite entries");
      }
      double sum = 0.0;
      for (size_t j = 0; j < d; ++j) {
        double e = std::exp(static_cast<double>(x[j]) - mx);
        y[j] = static_cast<T>(e);
        sum += e;
      }
      double inv = 1.0 / sum;
      for (size_t j = 0; j < d; ++j) y[j] = static_cast<T>(static_cast<double>(y[j]) * inv);
    }
    NodeId id = push_value(std::move(out));
    if (record_) {
      nodes_[id].backward = [a, rows, d](Tape& t) {
        const Tensor<T>& g = t.nodes_[t.current_].grad;
        const Tensor<T>& y = t.value(t.current_);
        Tensor<T>& da = t.grad_ref(a);
        for (size_t i = 0; i < rows; ++i) {
          const T* yi = y.data.data() + i * d;
          const T* gi = g.data.data() + i * d;
          double dot = 0.0;
          for (size_t j = 0; j < d; ++j)
            dot += static_cast<double>(gi[j]) * static_cast<double>(yi[j]);
          T* di = da.data.data() + i * d;
          for (size_t j = 0; j < d; ++j)
            di[j] += static_cast<T>(static_cast<double>(yi[j]) *
                                    (static_cast<double>(gi[j]) - dot));
        }
      };
      nodes_[id].inputs = {a};
    }
    return id;
  }

  // per-vector normalization over the last axis: population variance, eps
  // inside the square root, then gain (.) x + bias
  NodeId layer_norm(NodeId x, NodeId gain, NodeId bias, double eps) {
    const Tensor<T>& xv = value(x);
    size_t d = xv.last_dim();
    const Tensor<T>& gv = value(gain);
    const Tensor<T>& bv = value(bias);
    if (gv.numel() != d || bv.numel() != d) {
      throw ShapeError("layer_norm: gain/bias extent must be " + std::to_string(d));
    }
    if (eps < 0.0) throw ConfigError("layer_norm eps must be >= 0");
    size_t rows = xv.rows();
    Tensor<T> out(xv.shape);
    Tensor<T> xhat(xv.shape);
    std::vector<T> inv_std(rows);
    for (size_t i = 0; i < rows; ++i) {
      const T* xi = xv.data.data() + i * d;
      double mu = 0.0;
      for (size_t j = 0; j < d; ++j) mu += static_cast<double>(xi[j]);
      mu /= static_cast<double>(d);
      double var = 0.0;
      for (size_t j = 0; j < d; ++j) {
        double c = static_cast<double>(xi[j]) - mu;
        var += c * c;
      }
      var /= static_cast<double>(d);
      double is = 1.0 / std::sqrt(var + eps);
      inv_std[i] = static_cast<T>(is);
      T* hi = xhat.data.data() + i * d;
      T* oi = out.data.data() + i * d;
      for (size_t j = 0; j < d; ++j) {
        hi[j] = static_cast<T>((static_cast<double>(xi[j]) - mu) * is);
        oi[j] = static_cast<T>(static_cast<double>(gv[j]) * static_cast<double>(hi[j]) +
                               static_cast<double>(bv[j]));
      }
    }
    NodeId id = push_value(std::move(out));
    if (record_) {
      nodes_[id].backward = [x, gain, bias, rows, d, xhat = std::move(xhat),
                             inv_std = std::move(inv_std)](Tape& t) {
        const Tensor<T>& g = t.nodes_[t.current_].grad;
        const Tensor<T>& gv = t.value(gain);
        Tensor<T>& dx = t.grad_ref(x);
        Tensor<T>& dg = t.grad_ref(gain);
        Tensor<T>& db = t.grad_ref(bias);
        for (size_t i = 0; i < rows; ++i) {
          const T* gi = g.data.data() + i * d;
          const T* hi = xhat.data.data() + i * d;
          double sum_dh = 0.0, sum_dh_h = 0.0;
          for (size_t j = 0; j < d; ++j) {
            double dh = static_cast<double>(gi[j]) * static_cast<double>(gv[j]);
            sum_dh += dh;
            sum_dh_h += dh * static_cast<double>(hi[j]);
            dg[j] += static_cast<T>(static_cast<double>(gi[j]) * static_cast<double>(hi[j]));
            db[j] += gi[j];
          }
          double inv_d = 1.0 / static_cast<double>(d);
          double is = static_cast<double>(inv_std[i]);
          T* di = dx.data.data() + i * d;
          for (size_t j = 0; j < d; ++j) {
            double dh = static_cast<double>(gi[j]) * static_cast<double>(gv[j]);
            di[j] += static_cast<T>(
                is * (dh - inv_d * sum_dh -
                      static_cast<double>(hi[j]) * inv_d * sum_dh_h));
          }
        }
      };
      nodes_[id].inputs = {x, gain, bias};
    }
    return id;
  }

  // a + mask with extent-1 broadcasting on mask axes; mask gets no gradient
  NodeId add_broadcast_const(NodeId a, const Tensor<T>& mask) {
    const Tensor<T>& av = value(a);
    if (av.ndim() != mask.ndim()) {
      throw ShapeError("add_broadcast_const: ndim " + shape_string(av.shape) +
                       " vs " + shape_string(mask.shape));
    }
    size_t nd = av.ndim();
    for (size_t i = 0; i < nd; ++i) {
      if (mask.shape[i] != av.shape[i] && mask.shape[i] != 1) {
        throw ShapeError("add_broadcast_const: extent mismatch " +
                         shape_string(av.shape) + " vs " + shape_string(mask.shape));
      }
    }
    std::vector<size_t> mstride(nd);
    size_t s = 1;
    for (size_t i = nd; i-- > 0;) {
      mstride[i] = mask.shape[i] == 1 ? 0 : s;
      s *= mask.shape[i];
    }
    Tensor<T> out(av.shape);
    std::vector<size_t> idx(nd, 0);
    for (size_t flat = 0; flat < av.numel(); ++flat) {
      size_t moff = 0;
      for (size_t i = 0; i < nd; ++i) moff += idx[i] * mstride[i];
      out[flat] = av[flat] + mask[moff];
      for (size_t i = nd; i-- > 0;) {
        if (++idx[i] < av.shape[i]) break;
        idx[i] = 0;
      }
    }
    NodeId id = push_value(std::move(out));
    if (record_) {
      nodes_[id].backward = [a](Tape& t) {
        const Tensor<T>& g = t.nodes_[t.current_].grad;
        Tensor<T>& da = t.grad_ref(a);
        for (size_t i = 0; i < g.numel(); ++i) da[i] += g[i];
      };
      nodes_[id].inputs = {a};
    }
    return id;
  }

  // table [V, d] gathered by token ids, scaled, plus fixed positional rows:
  // out[b, t, :] = table[ids[b*T+t], :] * scl + pos[t, :]
  NodeId embed(NodeId table, std::span<const int32_t> ids, size_t batch,
               size_t len, T scl, const Tensor<T>* pos) {
    const Tensor<T>& tv = value(table);
    if (tv.ndim() != 2) throw ShapeError("embed table must be 2-d");
    size_t v = tv.shape[0];
    size_t d = tv.shape[1];
    if (ids.size() != batch * len) throw ShapeError("embed: ids length mismatch");
    if (pos != nullptr && (pos->ndim() != 2 || pos->shape[1] != d || pos->shape[0] < len)) {
      throw ShapeError("embed: positional table too small for length " +
                       std::to_string(len));
    }
    Tensor<T> out({batch, len, d});
    for (size_t b = 0; b < batch; ++b) {
      for (size_t t = 0; t < len; ++t) {
        int32_t id = ids[b * len + t];
        if (id < 0 || static_cast<size_t>(id) >= v) {
          throw IndexError("token id " + std::to_string(id) +
                           " outside vocabulary of size " + std::to_string(v));
        }
        const T* row = tv.data.data() + static_cast<size_t>(id) * d;
        const T* prow = pos ? pos->data.data() + t * d : nullptr;
        T* orow = out.data.data() + (b * len + t) * d;
        for (size_t j = 0; j < d; ++j)
          orow[j] = row[j] * scl + (prow ? prow[j] : T(0));
      }
    }
    NodeId nid = push_value(std::move(out));
    if (record_) {
      std::vector<int32_t> saved(ids.begin(), ids.end());
      nodes_[nid].backward = [table, batch, len, d, scl,
                              saved = std::move(saved)](Tape& t) {
        const Tensor<T>& g = t.nodes_[t.current_].grad;
        Tensor<T>& dt = t.grad_ref(table);
        for (size_t i = 0; i < batch * len; ++i) {
          T* drow = dt.data.data() + static_cast<size_t>(saved[i]) * d;
          const T* grow = g.data.data() + i * d;
          for (size_t j = 0; j < d; ++j) drow[j] += grow[j] * scl;
        }
      };
      nodes_[nid].inputs = {table};
    }
    return nid;
  }

  // [B, T, D] -> [B, H, T, D/H]
  NodeId split_heads(NodeId a, size_t heads) {
    const Tensor<T>& av = value(a);
    if (av.ndim() != 3) throw ShapeError("split_heads expects [B,T,D]");
    size_t b = av.shape[0], len = av.shape[1], d = av.shape[2];
    if (d % heads != 0) throw ConfigError("d_model not divisible by heads");
    size_t dh = d / heads;
    Tensor<T> out({b, heads, len, dh});
    for (size_t bi = 0; bi < b; ++bi)
      for (size_t t = 0; t < len; ++t)
        for (size_t h = 0; h < heads; ++h) {
          const T* src = av.data.data() + ((bi * len + t) * d) + h * dh;
          T* dst = out.data.data() + (((bi * heads + h) * len) + t) * dh;
          std::copy(src, src + dh, dst);
        }
    NodeId id = push_value(std::move(out));
    if (record_) {
      nodes_[id].backward = [a, b, len, d, heads, dh](Tape& t) {
        const Tensor<T>& g = t.nodes_[t.current_].grad;
        Tensor<T>& da = t.grad_ref(a);
        for (size_t bi = 0; bi < b; ++bi)
          for (size_t t2 = 0; t2 < len; ++t2)
            for (size_t h = 0; h < heads; ++h) {
              const T* src = g.data.data() + (((bi * heads + h) * len) + t2) * dh;
              T* dst = da.data.data() + ((bi * len + t2) * d) + h * dh;
              for (size_t j = 0; j < dh; ++j) dst[j] += src[j];
            }
      };
      nodes_[id].inputs = {a};
    }
    return id;
  }

  // [B, H, T, dh] -> [B, T, H*dh]
  NodeId merge_heads(NodeId a) {
    const Tensor<T>& av = value(a);
    if (av.ndim() != 4) throw ShapeError("merge_heads expects [B,H,T,dh]");
    size_t b = av.shape[0], heads = av.shape[1], len = av.shape[2], dh = av.shape[3];
    size_t d = heads * dh;
    Tensor<T> out({b, len, d});
    for (size_t bi = 0; bi < b; ++bi)
      for (size_t h = 0; h < heads; ++h)
        for (size_t t = 0; t < len; ++t) {
          const T* src = av.data.data() + (((bi * heads + h) * len) + t) * dh;
          T* dst = out.data.data() + ((bi * len + t) * d) + h * dh;
          std::copy(src, src + dh, dst);
        }
    NodeId id = push_value(std::move(out));
    if (record_) {
      nodes_[id].backward = [a, b, heads, len, dh, d](Tape& t) {
        const Tensor<T>& g = t.nodes_[t.current_].grad;
        Tensor<T>& da = t.grad_ref(a);
        for (size_t bi = 0; bi < b; ++bi)
          for (size_t h = 0; h < heads; ++h)
            for (size_t t2 = 0; t2 < len; ++t2) {
              const T* src = g.data.data() + ((bi * len + t2) * d) + h * dh;
              T* dst = da.data.data() + (((bi * heads + h) * len) + t2) * dh;
              for (size_t j = 0; j < dh; ++j) dst[j] += src[j];
            }
      };
      nodes_[id].inputs = {a};
    }
    return id;
  }

  // inverted dropout with an explicit stream seed; identity when rate == 0
  NodeId dropout(NodeId a, double rate, uint64_t stream_seed) {
    if (rate <= 0.0) return a;
    if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
    const Tensor<T>& av = value(a);
    Rng rng(stream_seed);
    T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    Tensor<T> mask(av.shape);
    for (size_t i = 0; i < mask.numel(); ++i)
      mask[i] = rng.next_double() < rate ? T(0) : keep_scale;
    Tensor<T> out(av.shape);
    for (size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * mask[i];
    NodeId id = push_value(std::move(out));
    if (record_) {
      nodes_[id].backward = [a, mask = std::move(mask)](Tape& t) {
        const Tensor<T>& g = t.nodes_[t.current_].grad;
        Tensor<T>& da = t.grad_ref(a);
        for (size_t i = 0; i < g.numel(); ++i) da[i] += g[i] * mask[i];
      };
      nodes_[id].inputs = {a};
    }
    return id;
  }

  struct LossStats {
    NodeId sum_node;     // sum over non-pad tokens of the smoothed NLL
    double nll_sum;      // unsmoothed NLL sum (epsilon = 0), for perplexity
    size_t tokens;       // non-pad token count
    size_t argmax_hits;  // tokens whose argmax logit equals the target
  };

  // label-smoothed cross entropy, summed over non-pad target tokens:
  // per token, (1-eps)*NLL(target) + eps * mean over the vocabulary of NLL(v)
  LossStats cross_entropy_ls_sum(NodeId logits, std::span<const int32_t> targets,
                                 double eps_ls, int32_t pad_id) {
    const Tensor<T>& lv = value(logits);
    size_t vsz = lv.last_dim();
    size_t rows = lv.rows();
    if (targets.size() != rows) {
      throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                       " targets for " + std::to_string(rows) + " logit rows");
    }
    double total = 0.0, nll_total = 0.0;
    size_t tokens = 0, hits = 0;
    for (size_t i = 0; i < rows; ++i) {
      int32_t tgt = targets[i];
      if (tgt == pad_id) continue;
      if (tgt < 0 || static_cast<size_t>(tgt) >= vsz) {
        throw IndexError("target id " + std::to_string(tgt) +
                         " outside vocabulary of size " + std::to_string(vsz));
      }
      const T* x = lv.data.data() + i * vsz;
      double mx = -std::numeric_limits<double>::infinity();
      size_t arg = 0;
      for (size_t j = 0; j < vsz; ++j) {
        double xj = static_cast<double>(x[j]);
        if (xj > mx) {
          mx = xj;
          arg = j;
        }
      }
      double sum = 0.0, lsum = 0.0;
      for (size_t j = 0; j < vsz; ++j) {
        double xj = static_cast<double>(x[j]);
        sum += std::exp(xj - mx);
        lsum += xj;
      }
      double lse = mx + std::log(sum);
      double nll = lse - static_cast<double>(x[tgt]);
      total += (1.0 - eps_ls) * nll + eps_ls * (lse - lsum / static_cast<double>(vsz));
      nll_total += nll;
      ++tokens;
      if (arg == static_cast<size_t>(tgt)) ++hits;
    }
    Tensor<T> out({1});
    out[0] = static_cast<T>(total);
    NodeId id = push_value(std::move(out));
    if (record_) {
      std::vector<int32_t> saved(targets.begin(), targets.end());
      nodes_[id].backward = [logits, vsz, rows, eps_ls, pad_id,
                             saved = std::move(saved)](Tape& t) {
        const Tensor<T>& g = t.nodes_[t.current_].grad;
        double up = static_cast<double>(g[0]);
        const Tensor<T>& lv = t.value(logits);
        Tensor<T>& dl = t.grad_ref(logits);
        double unif = eps_ls / static_cast<double>(vsz);
        for (size_t i = 0; i < rows; ++i) {
          int32_t tgt = saved[i];
          if (tgt == pad_id) continue;
          const T* x = lv.data.data() + i * vsz;
          T* d = dl.data.data() + i * vsz;
          double mx = -std::numeric_limits<double>::infinity();
          for (size_t j = 0; j < vsz; ++j)
            mx = std::max(mx, static_cast<double>(x[j]));
          double sum = 0.0;
          for (size_t j = 0; j < vsz; ++j) sum += std::exp(static_cast<double>(x[j]) - mx);
          double inv = 1.0 / sum;
          for (size_t j = 0; j < vsz; ++j) {
            double p = std::exp(static_cast<double>(x[j]) - mx) * inv;
            double w = unif + (static_cast<size_t>(tgt) == j ? 1.0 - eps_ls : 0.0);
            d[j] += static_cast<T>(up * (p - w));
          }
        }
      };
      nodes_[id].inputs = {logits};
    }
    return {id, nll_total, tokens, hits};
  }

  NodeId sum(NodeId a) {
    const Tensor<T>& av = value(a);
    double s = 0.0;
    for (size_t i = 0; i < av.numel(); ++i) s += static_cast<double>(av[i]);
    Tensor<T> out({1});
    out[0] = static_cast<T>(s);
    NodeId id = push_value(std::move(out));
    if (record_) {
      nodes_[id].backward = [a](Tape& t) {
        const Tensor<T>& g = t.nodes_[t.current_].grad;
        Tensor<T>& da = t.grad_ref(a);
        for (size_t i = 0; i < da.numel(); ++i) da[i] += g[0];
      };
      nodes_[id].inputs = {a};
    }
    return id;
  }

  // ---- backward ------------------------------------------------------

  void backward(NodeId loss) {
    if (!record_) {
      throw StateError("backward on a non-recording tape");
    }
    if (backward_done_) {
      throw StateError("stale tape: backward already ran; rebuild the forward pass");
    }
    if (value(loss).numel() != 1) {
      throw ContractError("backward requires a scalar loss node");
    }
    backward_done_ = true;
    grad_ref(loss)[0] = T(1);
    for (size_t i = loss + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward) continue;
      if (n.param == nullptr && n.grad.numel() == 0) continue;  // unreached
      current_ = static_cast<NodeId>(i);
      n.backward(*this);
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Parameter<T>* param = nullptr;
    Tensor<T> grad;
    std::function<void(Tape&)> backward;
    std::vector<NodeId> inputs;
  };

  Tensor<T>& grad_ref(NodeId id) {
    Node& n = nodes_[id];
    if (n.param) return n.param->grad;
    if (n.grad.numel() == 0) n.grad = Tensor<T>(value(id).shape);
    return n.grad;
  }

  NodeId push(Node&& n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  NodeId push_value(Tensor<T>&& v) {
    Node n;
    n.value = std::move(v);
    return push(std::move(n));
  }

  std::vector<Node> nodes_;
  bool record_;
  bool backward_done_ = false;
  NodeId current_ = 0;
};

template <typename T>
void zero_grads(const std::vector<Parameter<T>*>& params) {
  for (auto* p : params) p->zero_grad();
}

}  // namespace deepformer
