#include "certkit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace certkit {

std::string shape_to_string(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  if (shape_numel(shape_) != data.size()) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_to_string(shape_));
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::zeros(Shape shape) {
  std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(Shape shape, double v) {
  std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, v));
}

Tensor Tensor::identity(std::size_t n) {
  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1.0;
  return Tensor({n, n}, std::move(d));
}

double Tensor::value() const {
  if (size() != 1) {
    throw ShapeError("value() requires a scalar tensor, got shape " + shape_to_string(shape_));
  }
  return (*data_)[0];
}

bool Tensor::all_finite() const {
  for (double v : *data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor Tensor::with_tape(Tape* t, int node) const {
  Tensor r = *this;
  r.tape_ = t;
  r.node_ = node;
  return r;
}

std::vector<double>& GradStore::buffer(int node, std::size_t size) {
  auto& b = bufs_[static_cast<std::size_t>(node)];
  if (b.empty()) b.assign(size, 0.0);
  return b;
}

Tensor Gradients::wrt(const Tensor& t) const {
  if (t.tape() != tape_ || t.node() < 0) {
    throw TapeError("gradient requested for a tensor that is not on this tape");
  }
  if (!store_->touched(t.node())) return Tensor::zeros(t.shape());
  return Tensor(t.shape(), store_->at(t.node()));
}

Tensor Tape::var(const Tensor& value) {
  nodes_.push_back(Node{{}, nullptr, value.size()});
  return value.with_tape(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor Tape::record(Tensor result, std::vector<int> parents, BackFn back) {
  nodes_.push_back(Node{std::move(parents), std::move(back), result.size()});
  return result.with_tape(this, static_cast<int>(nodes_.size()) - 1);
}

Gradients Tape::backward(const Tensor& root) const {
  if (root.tape() != this || root.node() < 0) {
    throw TapeError("backward root is not on this tape");
  }
  if (root.size() != 1) {
    throw TapeError("backward root must be scalar, got shape " + shape_to_string(root.shape()));
  }
  auto store = std::make_shared<GradStore>(nodes_.size());
  store->buffer(root.node(), 1)[0] = 1.0;
  for (int id = root.node(); id >= 0; --id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!store->touched(id) || !n.back) continue;
    const auto& g = store->at(id);
    n.back(std::span<const double>(g.data(), g.size()), *store);
  }
  return Gradients(std::move(store), this);
}

// ---------------------------------------------------------------------------
// Op helpers
// ---------------------------------------------------------------------------

namespace {

Tape* tape_of(std::initializer_list<const Tensor*> ts) {
  Tape* tape = nullptr;
  for (const Tensor* t : ts) {
    if (!t || !t->on_tape()) continue;
    if (tape && t->tape() != tape) throw TapeError("op inputs come from two different tapes");
    tape = t->tape();
  }
  return tape;
}

// Strides for iterating a broadcast input over the output shape: 0 where the
// input dimension is 1 (or missing).
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t s = 1;
  std::vector<std::size_t> in_strides(in.size());
  for (int i = static_cast<int>(in.size()) - 1; i >= 0; --i) {
    in_strides[static_cast<std::size_t>(i)] = s;
    s *= in[static_cast<std::size_t>(i)];
  }
  std::size_t off = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i) {
    std::size_t o = off + i;
    if (in[i] == out[o]) {
      strides[o] = in_strides[i];
    } else if (in[i] == 1) {
      strides[o] = 0;
    } else {
      throw ShapeError("shapes do not broadcast");
    }
  }
  return strides;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const Shape& lo = a.size() < b.size() ? a : b;
  const Shape& hi = a.size() < b.size() ? b : a;
  Shape out = hi;
  std::size_t off = hi.size() - lo.size();
  for (std::size_t i = 0; i < lo.size(); ++i) {
    std::size_t o = off + i;
    if (lo[i] == hi[o]) continue;
    if (lo[i] == 1) continue;
    if (hi[o] == 1) {
      out[o] = lo[i];
      continue;
    }
    throw ShapeError("shapes " + shape_to_string(a) + " and " + shape_to_string(b) +
                     " are not broadcast-compatible");
  }
  return out;
}

// Maps each flat output index to flat indices of the two broadcast inputs.
struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> ia;  // per output element, index into a
  std::vector<std::size_t> ib;
  static BroadcastPlan make(const Shape& a, const Shape& b) {
    BroadcastPlan p;
    p.out = broadcast_shape(a, b);
    std::size_t n = shape_numel(p.out);
    auto sa = broadcast_strides(a, p.out);
    auto sb = broadcast_strides(b, p.out);
    p.ia.resize(n);
    p.ib.resize(n);
    std::vector<std::size_t> idx(p.out.size(), 0);
    for (std::size_t flat = 0; flat < n; ++flat) {
      std::size_t fa = 0, fb = 0;
      for (std::size_t d = 0; d < p.out.size(); ++d) {
        fa += idx[d] * sa[d];
        fb += idx[d] * sb[d];
      }
      p.ia[flat] = fa;
      p.ib[flat] = fb;
      for (int d = static_cast<int>(p.out.size()) - 1; d >= 0; --d) {
        auto ud = static_cast<std::size_t>(d);
        if (++idx[ud] < p.out[ud]) break;
        idx[ud] = 0;
      }
    }
    return p;
  }
};

using BinFn = double (*)(double, double);
using BinGrad = void (*)(double a, double b, double g, double& da, double& db);

Tensor binary_op(const Tensor& a, const Tensor& b, BinFn f, BinGrad gfn) {
  Tape* tape = tape_of({&a, &b});
  if (a.shape() == b.shape()) {
    // Fast path: no broadcasting.
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
    Tensor r(a.shape(), std::move(out));
    if (!tape) return r;
    std::vector<int> parents;
    if (a.on_tape()) parents.push_back(a.node());
    if (b.on_tape()) parents.push_back(b.node());
    return tape->record(r, parents, [a, b, gfn](std::span<const double> g, GradStore& store) {
      double* ga = a.on_tape() ? store.buffer(a.node(), a.size()).data() : nullptr;
      double* gb = b.on_tape() ? store.buffer(b.node(), b.size()).data() : nullptr;
      for (std::size_t i = 0; i < g.size(); ++i) {
        double da = 0, db = 0;
        gfn(a[i], b[i], g[i], da, db);
        if (ga) ga[i] += da;
        if (gb) gb[i] += db;
      }
    });
  }
  auto plan = BroadcastPlan::make(a.shape(), b.shape());
  std::size_t n = shape_numel(plan.out);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(a[plan.ia[i]], b[plan.ib[i]]);
  Tensor r(plan.out, std::move(out));
  if (!tape) return r;
  std::vector<int> parents;
  if (a.on_tape()) parents.push_back(a.node());
  if (b.on_tape()) parents.push_back(b.node());
  return tape->record(r, parents, [a, b, gfn, plan](std::span<const double> g, GradStore& store) {
    double* ga = a.on_tape() ? store.buffer(a.node(), a.size()).data() : nullptr;
    double* gb = b.on_tape() ? store.buffer(b.node(), b.size()).data() : nullptr;
    for (std::size_t i = 0; i < g.size(); ++i) {
      double da = 0, db = 0;
      gfn(a[plan.ia[i]], b[plan.ib[i]], g[i], da, db);
      if (ga) ga[plan.ia[i]] += da;
      if (gb) gb[plan.ib[i]] += db;
    }
  });
}

using UnFn = double (*)(double);
using UnGrad = double (*)(double x, double y);  // dL/dx given x and y=f(x), per unit grad

Tensor unary_op(const Tensor& a, UnFn f, UnGrad gfn) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i]);
  Tensor r(a.shape(), std::move(out));
  if (!a.on_tape()) return r;
  return a.tape()->record(r, {a.node()}, [a, r, gfn](std::span<const double> g, GradStore& store) {
    double* ga = store.buffer(a.node(), a.size()).data();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * gfn(a[i], r[i]);
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul shape mismatch: " + shape_to_string(a.shape()) + " x " +
                     shape_to_string(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
#pragma omp parallel for if (m * n * k > 65536)
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  Tensor r({m, n}, std::move(out));
  Tape* tape = tape_of({&a, &b});
  if (!tape) return r;
  std::vector<int> parents;
  if (a.on_tape()) parents.push_back(a.node());
  if (b.on_tape()) parents.push_back(b.node());
  return tape->record(r, parents, [a, b, m, k, n](std::span<const double> g, GradStore& store) {
    if (a.on_tape()) {
      double* ga = store.buffer(a.node(), a.size()).data();
      const double* pb = b.data().data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * pb[p * n + j];
          ga[i * k + p] += acc;
        }
    }
    if (b.on_tape()) {
      double* gb = store.buffer(b.node(), b.size()).data();
      const double* pa = a.data().data();
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) {
          double acc = 0;
          for (std::size_t i = 0; i < m; ++i) acc += pa[i * k + p] * g[i * n + j];
          gb[p * n + j] += acc;
        }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor* b) {
  if (x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1]) {
    throw ShapeError("linear shape mismatch: x " + shape_to_string(x.shape()) + ", w " +
                     shape_to_string(w.shape()));
  }
  const std::size_t batch = x.shape()[0], in = x.shape()[1], out_dim = w.shape()[0];
  if (b && b->size() != out_dim) {
    throw ShapeError("linear bias size " + std::to_string(b->size()) + " != " +
                     std::to_string(out_dim));
  }
  std::vector<double> out(batch * out_dim);
  const double* px = x.data().data();
  const double* pw = w.data().data();
#pragma omp parallel for if (batch * out_dim * in > 65536)
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t o = 0; o < out_dim; ++o) {
      double acc = b ? (*b)[o] : 0.0;
      const double* xi = px + i * in;
      const double* wo = pw + o * in;
      for (std::size_t p = 0; p < in; ++p) acc += xi[p] * wo[p];
      out[i * out_dim + o] = acc;
    }
  }
  Tensor r({batch, out_dim}, std::move(out));
  Tensor bias = b ? *b : Tensor();
  const bool has_bias = b != nullptr;
  Tape* tape = tape_of({&x, &w, b});
  if (!tape) return r;
  std::vector<int> parents;
  if (x.on_tape()) parents.push_back(x.node());
  if (w.on_tape()) parents.push_back(w.node());
  if (has_bias && bias.on_tape()) parents.push_back(bias.node());
  return tape->record(
      r, parents,
      [x, w, bias, has_bias, batch, in, out_dim](std::span<const double> g, GradStore& store) {
        if (x.on_tape()) {
          double* gx = store.buffer(x.node(), x.size()).data();
          const double* pw = w.data().data();
#pragma omp parallel for if (batch * out_dim * in > 65536)
          for (std::size_t i = 0; i < batch; ++i) {
            for (std::size_t o = 0; o < out_dim; ++o) {
              const double gv = g[i * out_dim + o];
              if (gv == 0.0) continue;
              const double* wo = pw + o * in;
              double* gxi = gx + i * in;
              for (std::size_t p = 0; p < in; ++p) gxi[p] += gv * wo[p];
            }
          }
        }
        if (w.on_tape()) {
          double* gw = store.buffer(w.node(), w.size()).data();
          const double* px = x.data().data();
#pragma omp parallel for if (batch * out_dim * in > 65536)
          for (std::size_t o = 0; o < out_dim; ++o) {
            double* gwo = gw + o * in;
            for (std::size_t i = 0; i < batch; ++i) {
              const double gv = g[i * out_dim + o];
              if (gv == 0.0) continue;
              const double* xi = px + i * in;
              for (std::size_t p = 0; p < in; ++p) gwo[p] += gv * xi[p];
            }
          }
        }
        if (has_bias && bias.on_tape()) {
          double* gb = store.buffer(bias.node(), bias.size()).data();
          for (std::size_t i = 0; i < batch; ++i)
            for (std::size_t o = 0; o < out_dim; ++o) gb[o] += g[i * out_dim + o];
        }
      });
}

Tensor conv2d(const Tensor& x, const Tensor& k, const Tensor* b, int stride, int pad) {
  if (x.rank() != 4 || k.rank() != 4 || x.shape()[1] != k.shape()[1]) {
    throw ShapeError("conv2d shape mismatch: x " + shape_to_string(x.shape()) + ", k " +
                     shape_to_string(k.shape()));
  }
  if (stride < 1) throw ShapeError("conv2d stride must be >= 1");
  const std::size_t batch = x.shape()[0], cin = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const std::size_t f = k.shape()[0], kh = k.shape()[2], kw = k.shape()[3];
  const std::size_t s = static_cast<std::size_t>(stride), p = static_cast<std::size_t>(pad);
  if (h + 2 * p < kh || w + 2 * p < kw) {
    throw ShapeError("conv2d kernel larger than padded input");
  }
  const std::size_t oh = (h + 2 * p - kh) / s + 1;
  const std::size_t ow = (w + 2 * p - kw) / s + 1;
  if (b && b->size() != f) throw ShapeError("conv2d bias size mismatch");

  std::vector<double> out(batch * f * oh * ow, 0.0);
  const double* px = x.data().data();
  const double* pk = k.data().data();
  auto xi = [&](std::size_t bi, std::size_t c, std::size_t i, std::size_t j) {
    return px[((bi * cin + c) * h + i) * w + j];
  };
#pragma omp parallel for if (batch > 1)
  for (std::size_t bi = 0; bi < batch; ++bi) {
    for (std::size_t fo = 0; fo < f; ++fo) {
      const double bv = b ? (*b)[fo] : 0.0;
      for (std::size_t oi = 0; oi < oh; ++oi) {
        for (std::size_t oj = 0; oj < ow; ++oj) {
          double acc = bv;
          for (std::size_t c = 0; c < cin; ++c) {
            for (std::size_t ki = 0; ki < kh; ++ki) {
              const long ii = static_cast<long>(oi * s + ki) - static_cast<long>(p);
              if (ii < 0 || ii >= static_cast<long>(h)) continue;
              for (std::size_t kj = 0; kj < kw; ++kj) {
                const long jj = static_cast<long>(oj * s + kj) - static_cast<long>(p);
                if (jj < 0 || jj >= static_cast<long>(w)) continue;
                acc += xi(bi, c, static_cast<std::size_t>(ii), static_cast<std::size_t>(jj)) *
                       pk[((fo * cin + c) * kh + ki) * kw + kj];
              }
            }
          }
          out[((bi * f + fo) * oh + oi) * ow + oj] = acc;
        }
      }
    }
  }
  Tensor r({batch, f, oh, ow}, std::move(out));
  Tensor bias = b ? *b : Tensor();
  const bool has_bias = b != nullptr;
  Tape* tape = tape_of({&x, &k, b});
  if (!tape) return r;
  std::vector<int> parents;
  if (x.on_tape()) parents.push_back(x.node());
  if (k.on_tape()) parents.push_back(k.node());
  if (has_bias && bias.on_tape()) parents.push_back(bias.node());
  return tape->record(
      r, parents,
      [x, k, bias, has_bias, batch, cin, h, w, f, kh, kw, s, p, oh,
       ow](std::span<const double> g, GradStore& store) {
        const double* pk = k.data().data();
        const double* px = x.data().data();
        if (x.on_tape()) {
          double* gx = store.buffer(x.node(), x.size()).data();
#pragma omp parallel for if (batch > 1)
          for (std::size_t bi = 0; bi < batch; ++bi) {
            for (std::size_t fo = 0; fo < f; ++fo) {
              for (std::size_t oi = 0; oi < oh; ++oi) {
                for (std::size_t oj = 0; oj < ow; ++oj) {
                  const double gv = g[((bi * f + fo) * oh + oi) * ow + oj];
                  if (gv == 0.0) continue;
                  for (std::size_t c = 0; c < cin; ++c) {
                    for (std::size_t ki = 0; ki < kh; ++ki) {
                      const long ii = static_cast<long>(oi * s + ki) - static_cast<long>(p);
                      if (ii < 0 || ii >= static_cast<long>(h)) continue;
                      for (std::size_t kj = 0; kj < kw; ++kj) {
                        const long jj = static_cast<long>(oj * s + kj) - static_cast<long>(p);
                        if (jj < 0 || jj >= static_cast<long>(w)) continue;
                        gx[((bi * cin + c) * h + static_cast<std::size_t>(ii)) * w +
                           static_cast<std::size_t>(jj)] +=
                            gv * pk[((fo * cin + c) * kh + ki) * kw + kj];
                      }
                    }
                  }
                }
              }
            }
          }
        }
        if (k.on_tape()) {
          double* gk = store.buffer(k.node(), k.size()).data();
#pragma omp parallel for if (f > 1)
          for (std::size_t fo = 0; fo < f; ++fo) {
            for (std::size_t bi = 0; bi < batch; ++bi) {
              for (std::size_t oi = 0; oi < oh; ++oi) {
                for (std::size_t oj = 0; oj < ow; ++oj) {
                  const double gv = g[((bi * f + fo) * oh + oi) * ow + oj];
                  if (gv == 0.0) continue;
                  for (std::size_t c = 0; c < cin; ++c) {
                    for (std::size_t ki = 0; ki < kh; ++ki) {
                      const long ii = static_cast<long>(oi * s + ki) - static_cast<long>(p);
                      if (ii < 0 || ii >= static_cast<long>(h)) continue;
                      for (std::size_t kj = 0; kj < kw; ++kj) {
                        const long jj = static_cast<long>(oj * s + kj) - static_cast<long>(p);
                        if (jj < 0 || jj >= static_cast<long>(w)) continue;
                        gk[((fo * cin + c) * kh + ki) * kw + kj] +=
                            gv * px[((bi * cin + c) * h + static_cast<std::size_t>(ii)) * w +
                                    static_cast<std::size_t>(jj)];
                      }
                    }
                  }
                }
              }
            }
          }
        }
        if (has_bias && bias.on_tape()) {
          double* gb = store.buffer(bias.node(), bias.size()).data();
          for (std::size_t bi = 0; bi < batch; ++bi)
            for (std::size_t fo = 0; fo < f; ++fo)
              for (std::size_t oi = 0; oi < oh; ++oi)
                for (std::size_t oj = 0; oj < ow; ++oj)
                  gb[fo] += g[((bi * f + fo) * oh + oi) * ow + oj];
        }
      });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose requires rank-2, got " + shape_to_string(a.shape()));
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  Tensor r({n, m}, std::move(out));
  if (!a.on_tape()) return r;
  return a.tape()->record(r, {a.node()}, [a, m, n](std::span<const double> g, GradStore& store) {
    double* ga = store.buffer(a.node(), a.size()).data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x + y; },
      [](double, double, double g, double& da, double& db) {
        da = g;
        db = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x - y; },
      [](double, double, double g, double& da, double& db) {
        da = g;
        db = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double g, double& da, double& db) {
        da = g * y;
        db = g * x;
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x / y; },
      [](double x, double y, double g, double& da, double& db) {
        da = g / y;
        db = -g * x / (y * y);
      });
}

Tensor neg(const Tensor& a) {
  return unary_op(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor relu(const Tensor& a) {
  return unary_op(a, [](double x) { return x > 0 ? x : 0.0; },
                  [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor abs(const Tensor& a) {
  return unary_op(a, [](double x) { return std::fabs(x); },
                  [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor exp(const Tensor& a) {
  return unary_op(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(a[i] > 0.0)) {
      throw DomainError("log of non-positive value " + std::to_string(a[i]) + " at index " +
                        std::to_string(i));
    }
  }
  return unary_op(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary_op(a, [](double x) { return std::sqrt(x); },
                  [](double, double y) { return 0.5 / y; });
}

Tensor sign(const Tensor& a) {
  return unary_op(a, [](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); },
                  [](double, double) { return 0.0; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (lo > hi) throw DomainError("clamp lo > hi");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(hi, std::max(lo, a[i]));
  Tensor r(a.shape(), std::move(out));
  if (!a.on_tape()) return r;
  return a.tape()->record(r, {a.node()}, [a, lo, hi](std::span<const double> g, GradStore& store) {
    double* ga = store.buffer(a.node(), a.size()).data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (a[i] > lo && a[i] < hi) ga[i] += g[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  Tensor r(a.shape(), std::move(out));
  if (!a.on_tape()) return r;
  return a.tape()->record(r, {a.node()}, [a, s](std::span<const double> g, GradStore& store) {
    double* ga = store.buffer(a.node(), a.size()).data();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + s;
  Tensor r(a.shape(), std::move(out));
  if (!a.on_tape()) return r;
  return a.tape()->record(r, {a.node()}, [a](std::span<const double> g, GradStore& store) {
    double* ga = store.buffer(a.node(), a.size()).data();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Tensor sum(const Tensor& a) {
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i];
  Tensor r = Tensor::scalar(acc);
  if (!a.on_tape()) return r;
  return a.tape()->record(r, {a.node()}, [a](std::span<const double> g, GradStore& store) {
    double* ga = store.buffer(a.node(), a.size()).data();
    for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g[0];
  });
}

Tensor max(const Tensor& a) {
  std::size_t arg = 0;
  for (std::size_t i = 1; i < a.size(); ++i) {
    if (a[i] > a[arg]) arg = i;
  }
  Tensor r = Tensor::scalar(a[arg]);
  if (!a.on_tape()) return r;
  return a.tape()->record(r, {a.node()}, [a, arg](std::span<const double> g, GradStore& store) {
    store.buffer(a.node(), a.size())[arg] += g[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Tensor scale_channels(const Tensor& x, const Tensor& s, const Tensor& t) {
  if (x.rank() < 2) throw ShapeError("scale_channels requires rank >= 2");
  const std::size_t c = x.shape()[1];
  if (s.size() != c || t.size() != c) {
    throw ShapeError("scale_channels channel mismatch: x " + shape_to_string(x.shape()) +
                     ", s size " + std::to_string(s.size()));
  }
  const std::size_t batch = x.shape()[0];
  const std::size_t inner = x.size() / (batch * c);
  std::vector<double> out(x.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t ci = 0; ci < c; ++ci) {
      const double sv = s[ci], tv = t[ci];
      const std::size_t base = (b * c + ci) * inner;
      for (std::size_t i = 0; i < inner; ++i) out[base + i] = x[base + i] * sv + tv;
    }
  Tensor r(x.shape(), std::move(out));
  Tape* tape = tape_of({&x, &s, &t});
  if (!tape) return r;
  std::vector<int> parents;
  if (x.on_tape()) parents.push_back(x.node());
  if (s.on_tape()) parents.push_back(s.node());
  if (t.on_tape()) parents.push_back(t.node());
  return tape->record(
      r, parents, [x, s, t, batch, c, inner](std::span<const double> g, GradStore& store) {
        double* gx = x.on_tape() ? store.buffer(x.node(), x.size()).data() : nullptr;
        double* gs = s.on_tape() ? store.buffer(s.node(), s.size()).data() : nullptr;
        double* gt = t.on_tape() ? store.buffer(t.node(), t.size()).data() : nullptr;
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t ci = 0; ci < c; ++ci) {
            const std::size_t base = (b * c + ci) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
              const double gv = g[base + i];
              if (gx) gx[base + i] += gv * s[ci];
              if (gs) gs[ci] += gv * x[base + i];
              if (gt) gt[ci] += gv;
            }
          }
      });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw ShapeError("reshape from " + shape_to_string(a.shape()) + " to " +
                     shape_to_string(shape) + " changes element count");
  }
  Tensor r(shape, a.data());
  if (!a.on_tape()) return r;
  return a.tape()->record(r, {a.node()}, [a](std::span<const double> g, GradStore& store) {
    double* ga = store.buffer(a.node(), a.size()).data();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  Tensor lg = logits;
  if (lg.rank() == 1) lg = reshape(lg, {1, lg.size()});
  if (lg.rank() != 2) throw ShapeError("cross-entropy expects [B,k] logits");
  const std::size_t batch = lg.shape()[0], k = lg.shape()[1];
  if (labels.size() != batch) {
    throw ShapeError("cross-entropy label count " + std::to_string(labels.size()) +
                     " != batch " + std::to_string(batch));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw DomainError("label " + std::to_string(y) + " out of range [0," + std::to_string(k - 1) +
                        "]");
    }
  }
  std::vector<double> out(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* row = lg.data().data() + b * k;
    double mx = row[0];
    for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, row[i]);
    double se = 0;
    for (std::size_t i = 0; i < k; ++i) se += std::exp(row[i] - mx);
    out[b] = mx + std::log(se) - row[static_cast<std::size_t>(labels[b])];
  }
  Tensor r({batch}, std::move(out));
  if (!lg.on_tape()) return r;
  Tensor cap = lg;
  return lg.tape()->record(
      r, {lg.node()}, [cap, labels, batch, k](std::span<const double> g, GradStore& store) {
        double* gl = store.buffer(cap.node(), cap.size()).data();
        for (std::size_t b = 0; b < batch; ++b) {
          const double gv = g[b];
          if (gv == 0.0) continue;
          const double* row = cap.data().data() + b * k;
          double mx = row[0];
          for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, row[i]);
          double se = 0;
          for (std::size_t i = 0; i < k; ++i) se += std::exp(row[i] - mx);
          for (std::size_t i = 0; i < k; ++i) {
            double soft = std::exp(row[i] - mx) / se;
            double ind = (static_cast<std::size_t>(labels[b]) == i) ? 1.0 : 0.0;
            gl[b * k + i] += gv * (soft - ind);
          }
        }
      });
}

Tensor logit_differences(const Tensor& logits, const std::vector<int>& labels) {
  Tensor lg = logits;
  if (lg.rank() == 1) lg = reshape(lg, {1, lg.size()});
  if (lg.rank() != 2) throw ShapeError("logit_differences expects [B,k] logits");
  const std::size_t batch = lg.shape()[0], k = lg.shape()[1];
  if (labels.size() != batch) throw ShapeError("logit_differences label count mismatch");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw DomainError("label " + std::to_string(y) + " out of range [0," + std::to_string(k - 1) +
                        "]");
    }
  }
  std::vector<double> out(batch * k);
  for (std::size_t b = 0; b < batch; ++b) {
    const double y_logit = lg[b * k + static_cast<std::size_t>(labels[b])];
    for (std::size_t i = 0; i < k; ++i) out[b * k + i] = y_logit - lg[b * k + i];
  }
  Tensor r({batch, k}, std::move(out));
  if (!lg.on_tape()) return r;
  Tensor cap = lg;
  return lg.tape()->record(r, {lg.node()},
                           [cap, labels, batch, k](std::span<const double> g, GradStore& store) {
                             double* gl = store.buffer(cap.node(), cap.size()).data();
                             for (std::size_t b = 0; b < batch; ++b) {
                               const std::size_t y = static_cast<std::size_t>(labels[b]);
                               for (std::size_t i = 0; i < k; ++i) {
                                 const double gv = g[b * k + i];
                                 gl[b * k + y] += gv;
                                 gl[b * k + i] -= gv;
                               }
                             }
                           });
}

Tensor elided_lower_bound(const Tensor& w, const Tensor& bias, const Tensor& mid,
                          const Tensor& rad, const std::vector<int>& labels) {
  if (w.rank() != 2 || mid.rank() != 2 || rad.shape() != mid.shape()) {
    throw ShapeError("elided_lower_bound shape mismatch");
  }
  const std::size_t k = w.shape()[0], m = w.shape()[1], batch = mid.shape()[0];
  if (mid.shape()[1] != m || bias.size() != k || labels.size() != batch) {
    throw ShapeError("elided_lower_bound dimension mismatch: w " + shape_to_string(w.shape()) +
                     ", mid " + shape_to_string(mid.shape()));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw DomainError("label " + std::to_string(y) + " out of range [0," + std::to_string(k - 1) +
                        "]");
    }
  }
  std::vector<double> out(batch * k, 0.0);
  const double* pw = w.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t y = static_cast<std::size_t>(labels[b]);
    const double* wy = pw + y * m;
    for (std::size_t i = 0; i < k; ++i) {
      if (i == y) continue;  // self-difference row is identically zero
      const double* wi = pw + i * m;
      double acc = bias[y] - bias[i];
      for (std::size_t p = 0; p < m; ++p) {
        const double e = wy[p] - wi[p];
        acc += e * mid[b * m + p] - std::fabs(e) * rad[b * m + p];
      }
      out[b * k + i] = acc;
    }
  }
  Tensor r({batch, k}, std::move(out));
  Tape* tape = tape_of({&w, &bias, &mid, &rad});
  if (!tape) return r;
  std::vector<int> parents;
  for (const Tensor* t : {&w, &bias, &mid, &rad}) {
    if (t->on_tape()) parents.push_back(t->node());
  }
  return tape->record(
      r, parents, [w, bias, mid, rad, labels, k, m, batch](std::span<const double> g,
                                                           GradStore& store) {
        double* gw = w.on_tape() ? store.buffer(w.node(), w.size()).data() : nullptr;
        double* gb = bias.on_tape() ? store.buffer(bias.node(), bias.size()).data() : nullptr;
        double* gm = mid.on_tape() ? store.buffer(mid.node(), mid.size()).data() : nullptr;
        double* gr = rad.on_tape() ? store.buffer(rad.node(), rad.size()).data() : nullptr;
        const double* pw = w.data().data();
        for (std::size_t b = 0; b < batch; ++b) {
          const std::size_t y = static_cast<std::size_t>(labels[b]);
          const double* wy = pw + y * m;
          for (std::size_t i = 0; i < k; ++i) {
            if (i == y) continue;
            const double gv = g[b * k + i];
            if (gv == 0.0) continue;
            const double* wi = pw + i * m;
            if (gb) {
              gb[y] += gv;
              gb[i] -= gv;
            }
            for (std::size_t p = 0; p < m; ++p) {
              const double e = wy[p] - wi[p];
              const double sg = e > 0 ? 1.0 : (e < 0 ? -1.0 : 0.0);
              const double mv = mid[b * m + p], rv = rad[b * m + p];
              if (gm) gm[b * m + p] += gv * e;
              if (gr) gr[b * m + p] -= gv * std::fabs(e);
              if (gw) {
                const double d = gv * (mv - sg * rv);
                gw[y * m + p] += d;
                gw[i * m + p] -= d;
              }
            }
          }
        }
      });
}

Tensor batchnorm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                       Tensor* batch_mean, Tensor* batch_var) {
  if (x.rank() != 2 && x.rank() != 4) throw ShapeError("batchnorm expects rank-2 or rank-4 input");
  const std::size_t batch = x.shape()[0], c = x.shape()[1];
  const std::size_t inner = x.size() / (batch * c);
  const std::size_t count = batch * inner;
  if (gamma.size() != c || beta.size() != c) throw ShapeError("batchnorm parameter size mismatch");
  if (count < 2) throw ShapeError("batchnorm needs at least 2 values per channel");

  std::vector<double> mu(c, 0.0), var(c, 0.0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t ci = 0; ci < c; ++ci) {
      const std::size_t base = (b * c + ci) * inner;
      for (std::size_t i = 0; i < inner; ++i) mu[ci] += x[base + i];
    }
  for (std::size_t ci = 0; ci < c; ++ci) mu[ci] /= static_cast<double>(count);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t ci = 0; ci < c; ++ci) {
      const std::size_t base = (b * c + ci) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        const double d = x[base + i] - mu[ci];
        var[ci] += d * d;
      }
    }
  for (std::size_t ci = 0; ci < c; ++ci) var[ci] /= static_cast<double>(count);

  if (batch_mean) *batch_mean = Tensor({c}, std::vector<double>(mu));
  if (batch_var) *batch_var = Tensor({c}, std::vector<double>(var));

  std::vector<double> inv_std(c);
  for (std::size_t ci = 0; ci < c; ++ci) inv_std[ci] = 1.0 / std::sqrt(var[ci] + eps);

  std::vector<double> out(x.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t ci = 0; ci < c; ++ci) {
      const std::size_t base = (b * c + ci) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        out[base + i] = (x[base + i] - mu[ci]) * inv_std[ci] * gamma[ci] + beta[ci];
      }
    }
  Tensor r(x.shape(), std::move(out));
  Tape* tape = tape_of({&x, &gamma, &beta});
  if (!tape) return r;
  std::vector<int> parents;
  for (const Tensor* t : {&x, &gamma, &beta}) {
    if (t->on_tape()) parents.push_back(t->node());
  }
  auto mu_c = std::make_shared<std::vector<double>>(std::move(mu));
  auto inv_c = std::make_shared<std::vector<double>>(std::move(inv_std));
  return tape->record(
      r, parents,
      [x, gamma, beta, mu_c, inv_c, batch, c, inner, count](std::span<const double> g,
                                                            GradStore& store) {
        double* gx = x.on_tape() ? store.buffer(x.node(), x.size()).data() : nullptr;
        double* gg = gamma.on_tape() ? store.buffer(gamma.node(), gamma.size()).data() : nullptr;
        double* gb = beta.on_tape() ? store.buffer(beta.node(), beta.size()).data() : nullptr;
        // Per channel: dL/dgamma = sum g*xhat, dL/dbeta = sum g,
        // dL/dx = gamma*inv_std*(g - mean(g) - xhat*mean(g*xhat)).
        for (std::size_t ci = 0; ci < c; ++ci) {
          const double im = (*inv_c)[ci], mv = (*mu_c)[ci];
          double sum_g = 0, sum_gx = 0;
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t base = (b * c + ci) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
              const double xhat = (x[base + i] - mv) * im;
              sum_g += g[base + i];
              sum_gx += g[base + i] * xhat;
            }
          }
          if (gg) gg[ci] += sum_gx;
          if (gb) gb[ci] += sum_g;
          if (gx) {
            const double n = static_cast<double>(count);
            for (std::size_t b = 0; b < batch; ++b) {
              const std::size_t base = (b * c + ci) * inner;
              for (std::size_t i = 0; i < inner; ++i) {
                const double xhat = (x[base + i] - mv) * im;
                gx[base + i] +=
                    gamma[ci] * im * (g[base + i] - sum_g / n - xhat * sum_gx / n);
              }
            }
          }
        }
      });
}

}  // namespace certkit
