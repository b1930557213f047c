// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include "desam/autograd.hpp"

#include <algorithm>
#include <cmath>

#include "desam/error.hpp"

namespace desam::ag {

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(const Tensor& p) {
  if (auto it = params_.find(&p); it != params_.end()) return Var(this, it->second);
  nodes_.push_back(Node{p, {}, {}, true});
  params_.emplace(&p, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, const std::vector<Var>& parents, Backward fn) {
  bool needs = false;
  for (const auto& p : parents) {
    if (p.valid() && p.requires_grad()) needs = true;
  }
  nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : Backward{}, needs});
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad(std::size_t id) {
  auto& n = nodes_[id];
  if (n.grad.size() != n.value.size()) n.grad = Tensor::zeros_like(n.value);
  return n.grad;
}

void Tape::backward(const Var& root) {
  if (root.value().size() != 1) {
    throw ShapeError("backward() needs a single-element root, got " +
                     shape_string(root.shape()));
  }
  grad(root.id()).fill(1.0);
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (n.backward && n.grad.size() == n.value.size()) n.backward(*this, i);
  }
}

const Tensor* Tape::grad_of(const Tensor& p) const {
  auto it = params_.find(&p);
  if (it == params_.end()) return nullptr;
  const auto& n = nodes_[it->second];
  if (n.grad.size() != n.value.size()) return nullptr;
  return &n.grad;
}

namespace {

void check_same(const Var& a, const Var& b, const char* op) {
  require_same_shape(a.value(), b.value(), op);
}

void check_rank(const Var& a, std::size_t r, const char* op) {
  if (a.value().rank() != r) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) +
                     ", got " + shape_string(a.shape()));
  }
}

}  // namespace

Var add(const Var& a, const Var& b) {
  check_same(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    for (auto id : {ia, ib}) {
      if (Tensor* d = t.grad_if(id)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
      }
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_same(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (Tensor* d = t.grad_if(ia)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
    }
    if (Tensor* d = t.grad_if(ib)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] -= g[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& av = t.value(ia);
    const Tensor& bv = t.value(ib);
    if (Tensor* d = t.grad_if(ia)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i] * bv[i];
    }
    if (Tensor* d = t.grad_if(ib)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i] * av[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= s;
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, s](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& d = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * s;
  });
}

Var relu(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& x = t.value(ia);
    Tensor& d = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > 0.0) d[i] += g[i];
    }
  });
}

Var sigmoid(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = 1.0 / (1.0 + std::exp(-v));
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& d = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Var square(const Var& a) { return mul(a, a); }

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const auto ia = a.id();
  return a.tape().record(Tensor::scalar(s), {a}, [ia](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    Tensor& d = t.grad(ia);
    for (auto& v : d.data()) v += g;
  });
}

Var mean(const Var& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var matmul(const Var& a, const Var& b) {
  check_rank(a, 2, "matmul");
  check_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  Tensor out({m, n});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double x = av[i * k + p];
      if (x == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += x * bv[p * n + j];
    }
  }
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, m, k, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& av = t.value(ia);
    const Tensor& bv = t.value(ib);
    if (Tensor* da = t.grad_if(ia)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bv[p * n + j];
          (*da)[i * k + p] += s;
        }
    }
    if (Tensor* db = t.grad_if(ib)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double x = av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) (*db)[p * n + j] += x * g[i * n + j];
        }
    }
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  check_rank(a, 2, "matmul_nt");
  check_rank(b, 2, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw ShapeError("matmul_nt: " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()) + "^T");
  }
  Tensor out({m, n});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += av[i * k + p] * bv[j * k + p];
      out[i * n + j] = s;
    }
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, m, k, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& av = t.value(ia);
    const Tensor& bv = t.value(ib);
    Tensor* da = t.grad_if(ia);
    Tensor* db = t.grad_if(ib);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double gij = g[i * n + j];
        if (gij == 0.0) continue;
        if (da)
          for (std::size_t p = 0; p < k; ++p) (*da)[i * k + p] += gij * bv[j * k + p];
        if (db)
          for (std::size_t p = 0; p < k; ++p) (*db)[j * k + p] += gij * av[i * k + p];
      }
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  Var y = matmul_nt(x, weight);
  if (!bias.valid()) return y;
  const std::size_t n = y.dim(0), out = y.dim(1);
  if (bias.value().size() != out) {
    throw ShapeError("linear: bias " + shape_string(bias.shape()) + " for output width " +
                     std::to_string(out));
  }
  Tensor v = y.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < out; ++j) v[i * out + j] += bias.value()[j];
  const auto iy = y.id(), ib = bias.id();
  return x.tape().record(std::move(v), {y, bias}, [iy, ib, n, out](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (Tensor* dy = t.grad_if(iy)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*dy)[i] += g[i];
    }
    if (Tensor* db = t.grad_if(ib)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < out; ++j) (*db)[j] += g[i * out + j];
    }
  });
}

Var softmax_rows(const Var& a) {
  check_rank(a, 2, "softmax_rows");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out = a.value();
  for (std::size_t i = 0; i < m; ++i) {
    double mx = out[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, out[i * n + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = std::exp(out[i * n + j] - mx);
      s += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= s;
  }
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, m, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& d = t.grad(ia);
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) d[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
    }
  });
}

Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps) {
  check_rank(x, 2, "layer_norm_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (gamma.value().size() != n || beta.value().size() != n) {
    throw ShapeError("layer_norm_rows: affine width mismatch");
  }
  Tensor xhat({m, n});
  std::vector<double> inv_std(m);
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xv[i * n + j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double c = xv[i * n + j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) xhat[i * n + j] = (xv[i * n + j] - mu) * inv_std[i];
  }
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out[i * n + j] = xhat[i * n + j] * gamma.value()[j] + beta.value()[j];
  const auto ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().record(
      std::move(out), {x, gamma, beta},
      [ix, ig, ib, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t,
                                                                              std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& gam = t.value(ig);
        if (Tensor* dg = t.grad_if(ig)) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) (*dg)[j] += g[i * n + j] * xhat[i * n + j];
        }
        if (Tensor* db = t.grad_if(ib)) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) (*db)[j] += g[i * n + j];
        }
        if (Tensor* dx = t.grad_if(ix)) {
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t i = 0; i < m; ++i) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double dh = g[i * n + j] * gam[j];
              mean_d += dh;
              mean_dx += dh * xhat[i * n + j];
            }
            mean_d *= inv_n;
            mean_dx *= inv_n;
            for (std::size_t j = 0; j < n; ++j) {
              const double dh = g[i * n + j] * gam[j];
              (*dx)[i * n + j] += inv_std[i] * (dh - mean_d - xhat[i * n + j] * mean_dx);
            }
          }
        }
      });
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t count) {
  check_rank(a, 2, "slice_rows");
  const std::size_t n = a.dim(1);
  if (begin + count > a.dim(0)) throw ShapeError("slice_rows: out of range");
  const auto& src = a.value().storage();
  Tensor out({count, n}, std::vector<double>(src.begin() + static_cast<std::ptrdiff_t>(begin * n),
                                             src.begin() + static_cast<std::ptrdiff_t>((begin + count) * n)));
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, begin, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& d = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) d[begin * n + i] += g[i];
  });
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t count) {
  check_rank(a, 2, "slice_cols");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (begin + count > n) throw ShapeError("slice_cols: out of range");
  Tensor out({m, count});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = a.value()[i * n + begin + j];
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, begin, count, m, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& d = t.grad(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) d[i * n + begin + j] += g[i * count + j];
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t n = parts[0].dim(1);
  std::size_t rows = 0;
  std::vector<std::size_t> ids, offsets;
  for (const auto& p : parts) {
    check_rank(p, 2, "concat_rows");
    if (p.dim(1) != n) throw ShapeError("concat_rows: column mismatch");
    ids.push_back(p.id());
    offsets.push_back(rows);
    rows += p.dim(0);
  }
  Tensor out({rows, n});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = parts[k].value();
    std::copy(v.data().begin(), v.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(offsets[k] * n));
  }
  return parts[0].tape().record(std::move(out), parts, [ids, offsets, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (Tensor* d = t.grad_if(ids[k])) {
        for (std::size_t i = 0; i < d->size(); ++i) (*d)[i] += g[offsets[k] * n + i];
      }
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t m = parts[0].dim(0);
  std::size_t cols = 0;
  std::vector<std::size_t> ids, offsets, widths;
  for (const auto& p : parts) {
    check_rank(p, 2, "concat_cols");
    if (p.dim(0) != m) throw ShapeError("concat_cols: row mismatch");
    ids.push_back(p.id());
    offsets.push_back(cols);
    widths.push_back(p.dim(1));
    cols += p.dim(1);
  }
  Tensor out({m, cols});
  for (std::size_t k = 0; k < parts.size(); ++k)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j)
        out[i * cols + offsets[k] + j] = parts[k].value()[i * widths[k] + j];
  return parts[0].tape().record(std::move(out), parts,
                                [ids, offsets, widths, m, cols](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (Tensor* d = t.grad_if(ids[k])) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j)
            (*d)[i * widths[k] + j] += g[i * cols + offsets[k] + j];
      }
    }
  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& d = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

Var chw_to_tokens(const Var& a) {
  check_rank(a, 3, "chw_to_tokens");
  const std::size_t c = a.dim(0), hw = a.dim(1) * a.dim(2);
  Tensor out({hw, c});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < hw; ++p) out[p * c + ch] = a.value()[ch * hw + p];
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, c, hw](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& d = t.grad(ia);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) d[ch * hw + p] += g[p * c + ch];
  });
}

Var tokens_to_chw(const Var& a, std::size_t height, std::size_t width) {
  check_rank(a, 2, "tokens_to_chw");
  const std::size_t hw = a.dim(0), c = a.dim(1);
  if (hw != height * width) throw ShapeError("tokens_to_chw: token count mismatch");
  Tensor out({c, height, width});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < hw; ++p) out[ch * hw + p] = a.value()[p * c + ch];
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, c, hw](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& d = t.grad(ia);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) d[p * c + ch] += g[ch * hw + p];
  });
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t pad) {
  check_rank(x, 3, "conv2d");
  check_rank(weight, 4, "conv2d weight");
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != cin || weight.dim(3) != k) {
    throw ShapeError("conv2d: weight " + shape_string(weight.shape()) + " for input " +
                     shape_string(x.shape()));
  }
  if (h + 2 * pad < k || w + 2 * pad < k) throw ShapeError("conv2d: kernel larger than input");
  const std::size_t oh = h + 2 * pad - k + 1, ow = w + 2 * pad - k + 1;
  if (bias.valid() && bias.value().size() != cout) throw ShapeError("conv2d: bias size");

  Tensor out({cout, oh, ow});
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  for (std::size_t o = 0; o < cout; ++o) {
    double* op = out.data().data() + o * oh * ow;
    if (bias.valid()) std::fill(op, op + oh * ow, bias.value()[o]);
    for (std::size_t c = 0; c < cin; ++c) {
      const double* ip = xv.data().data() + c * h * w;
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          const double wt = wv[((o * cin + c) * k + ky) * k + kx];
          if (wt == 0.0) continue;
          const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - static_cast<std::ptrdiff_t>(pad);
          const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(pad);
          const std::size_t y0 = dy < 0 ? static_cast<std::size_t>(-dy) : 0;
          const std::size_t y1 = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(oh),
                                                          static_cast<std::ptrdiff_t>(h) - dy);
          const std::size_t x0 = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
          const std::size_t x1 = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(ow),
                                                          static_cast<std::ptrdiff_t>(w) - dx);
          for (std::size_t y = y0; y < y1; ++y) {
            const double* row = ip + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(y) + dy) * w;
            double* orow = op + y * ow;
            for (std::size_t xx = x0; xx < x1; ++xx)
              orow[xx] += wt * row[static_cast<std::size_t>(static_cast<std::ptrdiff_t>(xx) + dx)];
          }
        }
    }
  }

  const auto ix = x.id(), iw = weight.id();
  const std::size_t ib = bias.valid() ? bias.id() : SIZE_MAX;
  std::vector<Var> parents{x, weight};
  if (bias.valid()) parents.push_back(bias);
  return x.tape().record(
      std::move(out), parents,
      [=](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& xv = t.value(ix);
        const Tensor& wv = t.value(iw);
        Tensor* dxp = t.grad_if(ix);
        Tensor* dwp = t.grad_if(iw);
        if (ib != SIZE_MAX) {
          if (Tensor* db = t.grad_if(ib)) {
            for (std::size_t o = 0; o < cout; ++o) {
              double s = 0.0;
              for (std::size_t p = 0; p < oh * ow; ++p) s += g[o * oh * ow + p];
              (*db)[o] += s;
            }
          }
        }
        for (std::size_t o = 0; o < cout; ++o) {
          const double* gp = g.data().data() + o * oh * ow;
          for (std::size_t c = 0; c < cin; ++c) {
            const double* ip = xv.data().data() + c * h * w;
            double* dip = dxp ? dxp->data().data() + c * h * w : nullptr;
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const std::size_t widx = ((o * cin + c) * k + ky) * k + kx;
                const double wt = wv[widx];
                const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - static_cast<std::ptrdiff_t>(pad);
                const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(pad);
                const std::size_t y0 = dy < 0 ? static_cast<std::size_t>(-dy) : 0;
                const std::size_t y1 = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(oh),
                                                                static_cast<std::ptrdiff_t>(h) - dy);
                const std::size_t x0 = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
                const std::size_t x1 = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(ow),
                                                                static_cast<std::ptrdiff_t>(w) - dx);
                double sw = 0.0;
                for (std::size_t y = y0; y < y1; ++y) {
                  const std::size_t iy = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(y) + dy);
                  const double* grow = gp + y * ow;
                  const double* row = ip + iy * w;
                  for (std::size_t xx = x0; xx < x1; ++xx) {
                    const std::size_t ixx = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(xx) + dx);
                    sw += grow[xx] * row[ixx];
                    if (dip) dip[iy * w + ixx] += wt * grow[xx];
                  }
                }
                if (dwp) (*dwp)[widx] += sw;
              }
          }
        }
      });
}

Var conv_transpose2x2(const Var& x, const Var& weight, const Var& bias) {
  check_rank(x, 3, "conv_transpose2x2");
  check_rank(weight, 4, "conv_transpose2x2 weight");
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t cout = weight.dim(1);
  if (weight.dim(0) != cin || weight.dim(2) != 2 || weight.dim(3) != 2) {
    throw ShapeError("conv_transpose2x2: weight " + shape_string(weight.shape()));
  }
  const std::size_t oh = 2 * h, ow = 2 * w;
  Tensor out({cout, oh, ow});
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  for (std::size_t o = 0; o < cout; ++o) {
    if (bias.valid()) std::fill_n(out.data().begin() + static_cast<std::ptrdiff_t>(o * oh * ow), oh * ow, bias.value()[o]);
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx) {
          const double v = xv[(c * h + y) * w + xx];
          for (std::size_t ky = 0; ky < 2; ++ky)
            for (std::size_t kx = 0; kx < 2; ++kx)
              out[(o * oh + 2 * y + ky) * ow + 2 * xx + kx] += v * wv[((c * cout + o) * 2 + ky) * 2 + kx];
        }
  }
  const auto ix = x.id(), iw = weight.id();
  const std::size_t ib = bias.valid() ? bias.id() : SIZE_MAX;
  std::vector<Var> parents{x, weight};
  if (bias.valid()) parents.push_back(bias);
  return x.tape().record(std::move(out), parents, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(ix);
    const Tensor& wv = t.value(iw);
    Tensor* dx = t.grad_if(ix);
    Tensor* dw = t.grad_if(iw);
    if (ib != SIZE_MAX) {
      if (Tensor* db = t.grad_if(ib)) {
        for (std::size_t o = 0; o < cout; ++o)
          for (std::size_t p = 0; p < oh * ow; ++p) (*db)[o] += g[o * oh * ow + p];
      }
    }
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t xx = 0; xx < w; ++xx)
            for (std::size_t ky = 0; ky < 2; ++ky)
              for (std::size_t kx = 0; kx < 2; ++kx) {
                const double gv = g[(o * oh + 2 * y + ky) * ow + 2 * xx + kx];
                const std::size_t widx = ((c * cout + o) * 2 + ky) * 2 + kx;
                if (dx) (*dx)[(c * h + y) * w + xx] += gv * wv[widx];
                if (dw) (*dw)[widx] += gv * xv[(c * h + y) * w + xx];
              }
  });
}

Var group_norm(const Var& x, std::size_t groups, const Var& gamma, const Var& beta, double eps) {
  check_rank(x, 3, "group_norm");
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  if (groups == 0 || c % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                     std::to_string(groups) + " groups");
  }
  if (gamma.value().size() != c || beta.value().size() != c) {
    throw ShapeError("group_norm: affine size mismatch");
  }
  const std::size_t cpg = c / groups, count = cpg * hw;
  const Tensor& xv = x.value();
  Tensor xhat(x.shape());
  std::vector<double> inv_std(groups);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const std::size_t base = gi * count;
    double mu = 0.0;
    for (std::size_t i = 0; i < count; ++i) mu += xv[base + i];
    mu /= static_cast<double>(count);
    double var = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
      const double d = xv[base + i] - mu;
      var += d * d;
    }
    var /= static_cast<double>(count);
    inv_std[gi] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < count; ++i) xhat[base + i] = (xv[base + i] - mu) * inv_std[gi];
  }
  Tensor out(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < hw; ++p)
      out[ch * hw + p] = xhat[ch * hw + p] * gamma.value()[ch] + beta.value()[ch];
  const auto ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().record(
      std::move(out), {x, gamma, beta},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& gam = t.value(ig);
        if (Tensor* dg = t.grad_if(ig)) {
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < hw; ++p) (*dg)[ch] += g[ch * hw + p] * xhat[ch * hw + p];
        }
        if (Tensor* db = t.grad_if(ib)) {
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < hw; ++p) (*db)[ch] += g[ch * hw + p];
        }
        if (Tensor* dx = t.grad_if(ix)) {
          const double inv_n = 1.0 / static_cast<double>(count);
          for (std::size_t gi = 0; gi < groups; ++gi) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t ch = gi * cpg; ch < (gi + 1) * cpg; ++ch)
              for (std::size_t p = 0; p < hw; ++p) {
                const double dh = g[ch * hw + p] * gam[ch];
                mean_d += dh;
                mean_dx += dh * xhat[ch * hw + p];
              }
            mean_d *= inv_n;
            mean_dx *= inv_n;
            for (std::size_t ch = gi * cpg; ch < (gi + 1) * cpg; ++ch)
              for (std::size_t p = 0; p < hw; ++p) {
                const double dh = g[ch * hw + p] * gam[ch];
                (*dx)[ch * hw + p] += inv_std[gi] * (dh - mean_d - xhat[ch * hw + p] * mean_dx);
              }
          }
        }
      });
}

Var global_avg_pool(const Var& x) {
  check_rank(x, 3, "global_avg_pool");
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  Tensor out({c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::size_t p = 0; p < hw; ++p) s += x.value()[ch * hw + p];
    out[ch] = s / static_cast<double>(hw);
  }
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, c, hw](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& d = t.grad(ix);
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) d[ch * hw + p] += g[ch] * inv;
  });
}

Var scale_channels(const Var& x, const Var& s) {
  check_rank(x, 3, "scale_channels");
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  if (s.value().size() != c) throw ShapeError("scale_channels: scale size mismatch");
  Tensor out = x.value();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < hw; ++p) out[ch * hw + p] *= s.value()[ch];
  const auto ix = x.id(), is = s.id();
  return x.tape().record(std::move(out), {x, s}, [ix, is, c, hw](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(ix);
    const Tensor& sv = t.value(is);
    if (Tensor* dx = t.grad_if(ix)) {
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < hw; ++p) (*dx)[ch * hw + p] += g[ch * hw + p] * sv[ch];
    }
    if (Tensor* ds = t.grad_if(is)) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (std::size_t p = 0; p < hw; ++p) acc += g[ch * hw + p] * xv[ch * hw + p];
        (*ds)[ch] += acc;
      }
    }
  });
}

namespace {

struct Tap {
  std::size_t lo, hi;
  double w_hi;
};

std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    std::size_t lo = static_cast<std::size_t>(src);
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[i] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

Var bilinear_resize(const Var& x, std::size_t out_h, std::size_t out_w) {
  check_rank(x, 3, "bilinear_resize");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h == out_h && w == out_w) return x;
  if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_resize: empty output");
  auto ty = bilinear_taps(h, out_h);
  auto tx = bilinear_taps(w, out_w);
  Tensor out({c, out_h, out_w});
  const Tensor& xv = x.value();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto& a = ty[y];
      const double* r0 = xv.data().data() + (ch * h + a.lo) * w;
      const double* r1 = xv.data().data() + (ch * h + a.hi) * w;
      for (std::size_t xx = 0; xx < out_w; ++xx) {
        const auto& b = tx[xx];
        const double top = r0[b.lo] * (1.0 - b.w_hi) + r0[b.hi] * b.w_hi;
        const double bot = r1[b.lo] * (1.0 - b.w_hi) + r1[b.hi] * b.w_hi;
        out[(ch * out_h + y) * out_w + xx] = top * (1.0 - a.w_hi) + bot * a.w_hi;
      }
    }
  const auto ix = x.id();
  return x.tape().record(std::move(out), {x}, [=, ty = std::move(ty), tx = std::move(tx)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& d = t.grad(ix);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < out_h; ++y) {
        const auto& a = ty[y];
        double* r0 = d.data().data() + (ch * h + a.lo) * w;
        double* r1 = d.data().data() + (ch * h + a.hi) * w;
        for (std::size_t xx = 0; xx < out_w; ++xx) {
          const auto& b = tx[xx];
          const double gv = g[(ch * out_h + y) * out_w + xx];
          const double top = gv * (1.0 - a.w_hi), bot = gv * a.w_hi;
          r0[b.lo] += top * (1.0 - b.w_hi);
          r0[b.hi] += top * b.w_hi;
          r1[b.lo] += bot * (1.0 - b.w_hi);
          r1[b.hi] += bot * b.w_hi;
        }
      }
  });
}

}  // namespace desam::ag
