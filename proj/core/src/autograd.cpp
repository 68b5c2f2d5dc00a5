// Copyright 2026 The IPA Authors
// SPDX-License-Identifier: Apache-2.0

#include "ipa/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace ipa::ops {
namespace {

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

template <typename T>
void require_rank2(const Var<T>& a, const char* op) {
  if (a.value().rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_string(a.shape()));
  }
}

template <typename T>
void require_same_tape(const Var<T>& a, const Var<T>& b) {
  if (&a.tape() != &b.tape()) throw ShapeError("operands live on different tapes");
}

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  auto o = out.data();
  auto y = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += y[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& tape, const Tensor<T>& g) {
    tape.accumulate(ia, g);
    tape.accumulate(ib, g);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  auto o = out.data();
  auto y = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= y[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& tape, const Tensor<T>& g) {
    tape.accumulate(ia, g);
    if (tape.requires_grad(ib)) {
      Tensor<T> neg = g;
      for (T& v : neg.data()) v = -v;
      tape.accumulate(ib, neg);
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  auto o = out.data();
  auto y = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= y[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& tape, const Tensor<T>& g) {
    if (tape.requires_grad(ia)) {
      Tensor<T> d = g;
      auto bv = tape.value(ib).data();
      for (std::size_t i = 0; i < bv.size(); ++i) d[i] *= bv[i];
      tape.accumulate(ia, d);
    }
    if (tape.requires_grad(ib)) {
      Tensor<T> d = g;
      auto av = tape.value(ia).data();
      for (std::size_t i = 0; i < av.size(); ++i) d[i] *= av[i];
      tape.accumulate(ib, d);
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (T& v : out.data()) v *= factor;
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, factor](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T> d = g;
    for (T& v : d.data()) v *= factor;
    tape.accumulate(ia, d);
  });
}

template <typename T>
Var<T> add_row(const Var<T>& x, const Var<T>& bias) {
  require_same_tape(x, bias);
  const Tensor<T>& xv = x.value();
  const Tensor<T>& bv = bias.value();
  if (bv.rank() != 1 || bv.numel() != xv.cols()) {
    throw ShapeError("add_row: bias " + shape_string(bv.shape()) + " does not match " +
                     shape_string(xv.shape()));
  }
  Tensor<T> out = xv;
  const std::size_t rows = out.rows(), cols = out.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    T* o = out.data().data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) o[c] += bv[c];
  }
  const std::size_t ix = x.id(), ib = bias.id();
  return x.tape().record(std::move(out), {x, bias},
                         [ix, ib, rows, cols](Tape<T>& tape, const Tensor<T>& g) {
                           tape.accumulate(ix, g);
                           if (tape.requires_grad(ib)) {
                             Tensor<T> d(Shape{cols});
                             for (std::size_t r = 0; r < rows; ++r) {
                               for (std::size_t c = 0; c < cols; ++c) d[c] += g[r * cols + c];
                             }
                             tape.accumulate(ib, d);
                           }
                         });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require_same_tape(a, b);
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  Tensor<T> out(Shape{m, n});
  const T* av = a.value().data().data();
  const T* bv = b.value().data().data();
  T* o = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* orow = o + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T s = av[i * k + p];
      const T* brow = bv + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += s * brow[j];
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b},
                         [ia, ib, m, k, n](Tape<T>& tape, const Tensor<T>& g) {
                           const T* gv = g.data().data();
                           if (tape.requires_grad(ia)) {
                             const T* bv = tape.value(ib).data().data();
                             T* da = tape.grad_buffer(ia).data().data();
                             for (std::size_t i = 0; i < m; ++i) {
                               for (std::size_t p = 0; p < k; ++p) {
                                 T acc{0};
                                 const T* brow = bv + p * n;
                                 const T* grow = gv + i * n;
                                 for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                                 da[i * k + p] += acc;
                               }
                             }
                           }
                           if (tape.requires_grad(ib)) {
                             const T* av = tape.value(ia).data().data();
                             T* db = tape.grad_buffer(ib).data().data();
                             for (std::size_t i = 0; i < m; ++i) {
                               const T* grow = gv + i * n;
                               for (std::size_t p = 0; p < k; ++p) {
                                 const T s = av[i * k + p];
                                 T* drow = db + p * n;
                                 for (std::size_t j = 0; j < n; ++j) drow[j] += s * grow[j];
                               }
                             }
                           }
                         });
}

template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  require_same_tape(a, b);
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k) {
    throw ShapeError("matmul_nt: inner dimensions differ " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()) + "^T");
  }
  Tensor<T> out(Shape{m, n});
  const T* av = a.value().data().data();
  const T* bv = b.value().data().data();
  T* o = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc{0};
      for (std::size_t p = 0; p < k; ++p) acc += av[i * k + p] * bv[j * k + p];
      o[i * n + j] = acc;
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b},
                         [ia, ib, m, k, n](Tape<T>& tape, const Tensor<T>& g) {
                           const T* gv = g.data().data();
                           if (tape.requires_grad(ia)) {
                             const T* bv = tape.value(ib).data().data();
                             T* da = tape.grad_buffer(ia).data().data();
                             for (std::size_t i = 0; i < m; ++i) {
                               for (std::size_t j = 0; j < n; ++j) {
                                 const T s = gv[i * n + j];
                                 for (std::size_t p = 0; p < k; ++p) da[i * k + p] += s * bv[j * k + p];
                               }
                             }
                           }
                           if (tape.requires_grad(ib)) {
                             const T* av = tape.value(ia).data().data();
                             T* db = tape.grad_buffer(ib).data().data();
                             for (std::size_t i = 0; i < m; ++i) {
                               for (std::size_t j = 0; j < n; ++j) {
                                 const T s = gv[i * n + j];
                                 for (std::size_t p = 0; p < k; ++p) db[j * k + p] += s * av[i * k + p];
                               }
                             }
                           }
                         });
}

template <typename T>
Var<T> gather_rows(const Var<T>& table, std::span<const TokenIndex> ids) {
  require_rank2(table, "gather_rows");
  const std::size_t v = table.shape()[0], d = table.shape()[1];
  Tensor<T> out(Shape{ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= v) {
      throw IndexError("gather_rows: index " + std::to_string(ids[r]) + " outside [0, " +
                       std::to_string(v) + ")");
    }
    auto src = table.value().row(static_cast<std::size_t>(ids[r]));
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  std::vector<TokenIndex> saved(ids.begin(), ids.end());
  const std::size_t it = table.id();
  return table.tape().record(std::move(out), {table},
                             [it, d, saved = std::move(saved)](Tape<T>& tape, const Tensor<T>& g) {
                               Tensor<T>& dt = tape.grad_buffer(it);
                               for (std::size_t r = 0; r < saved.size(); ++r) {
                                 T* dst = dt.data().data() + static_cast<std::size_t>(saved[r]) * d;
                                 const T* src = g.data().data() + r * d;
                                 for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
                               }
                             });
}

template <typename T>
Var<T> slice_rows(const Var<T>& x, std::size_t begin, std::size_t end) {
  require_rank2(x, "slice_rows");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (begin > end || end > rows) {
    throw IndexError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") outside " + std::to_string(rows) + " rows");
  }
  const auto src = x.value().data();
  Tensor<T> out(Shape{end - begin, cols},
                std::vector<T>(src.begin() + begin * cols, src.begin() + end * cols));
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, begin, cols](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T>& dx = tape.grad_buffer(ix);
    T* dst = dx.data().data() + begin * cols;
    for (std::size_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
  });
}

template <typename T>
Var<T> slice_cols(const Var<T>& x, std::size_t begin, std::size_t end) {
  require_rank2(x, "slice_cols");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (begin > end || end > cols) {
    throw IndexError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") outside " + std::to_string(cols) + " columns");
  }
  const std::size_t w = end - begin;
  Tensor<T> out(Shape{rows, w});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = x.value()[r * cols + begin + c];
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x},
                         [ix, begin, rows, cols, w](Tape<T>& tape, const Tensor<T>& g) {
                           Tensor<T>& dx = tape.grad_buffer(ix);
                           for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t c = 0; c < w; ++c) dx[r * cols + begin + c] += g[r * w + c];
                           }
                         });
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t cols = parts[0].value().cols();
  std::size_t rows = 0;
  for (const Var<T>& p : parts) {
    require_rank2(p, "concat_rows");
    require_same_tape(p, parts[0]);
    if (p.value().cols() != cols) throw ShapeError("concat_rows: column counts differ");
    rows += p.value().rows();
  }
  std::vector<T> data;
  data.reserve(rows * cols);
  std::vector<std::size_t> ids;
  std::vector<std::size_t> offsets;
  for (const Var<T>& p : parts) {
    offsets.push_back(data.size());
    ids.push_back(p.id());
    data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  }
  return parts[0].tape().record(Tensor<T>(Shape{rows, cols}, std::move(data)), parts,
                                [ids, offsets](Tape<T>& tape, const Tensor<T>& g) {
                                  for (std::size_t i = 0; i < ids.size(); ++i) {
                                    if (!tape.requires_grad(ids[i])) continue;
                                    Tensor<T>& d = tape.grad_buffer(ids[i]);
                                    for (std::size_t j = 0; j < d.numel(); ++j) d[j] += g[offsets[i] + j];
                                  }
                                });
}

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts[0].value().rows();
  std::size_t cols = 0;
  for (const Var<T>& p : parts) {
    require_rank2(p, "concat_cols");
    require_same_tape(p, parts[0]);
    if (p.value().rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += p.value().cols();
  }
  Tensor<T> out(Shape{rows, cols});
  std::vector<std::size_t> ids, offsets, widths;
  std::size_t off = 0;
  for (const Var<T>& p : parts) {
    const std::size_t w = p.value().cols();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < w; ++c) out[r * cols + off + c] = p.value()[r * w + c];
    }
    ids.push_back(p.id());
    offsets.push_back(off);
    widths.push_back(w);
    off += w;
  }
  return parts[0].tape().record(std::move(out), parts,
                                [ids, offsets, widths, rows, cols](Tape<T>& tape, const Tensor<T>& g) {
                                  for (std::size_t i = 0; i < ids.size(); ++i) {
                                    if (!tape.requires_grad(ids[i])) continue;
                                    Tensor<T>& d = tape.grad_buffer(ids[i]);
                                    const std::size_t w = widths[i];
                                    for (std::size_t r = 0; r < rows; ++r) {
                                      for (std::size_t c = 0; c < w; ++c) {
                                        d[r * w + c] += g[r * cols + offsets[i] + c];
                                      }
                                    }
                                  }
                                });
}

template <typename T>
Var<T> softmax(const Var<T>& x) {
  Tensor<T> out = x.value();
  const std::size_t rows = out.rows(), cols = out.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = out.row(r);
    const T m = *std::max_element(row.begin(), row.end());
    T s{0};
    for (T& v : row) {
      v = std::exp(v - m);
      s += v;
    }
    for (T& v : row) v /= s;
  }
  const std::size_t ix = x.id();
  const std::size_t self = x.tape().size();
  return x.tape().record(std::move(out), {x}, [ix, self, rows, cols](Tape<T>& tape, const Tensor<T>& g) {
    const Tensor<T>& y = tape.value(self);
    Tensor<T> d(y.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      T dot{0};
      for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) d[r * cols + c] = y[r * cols + c] * (g[r * cols + c] - dot);
    }
    tape.accumulate(ix, d);
  });
}

template <typename T>
Var<T> log_softmax(const Var<T>& x) {
  Tensor<T> out = x.value();
  const std::size_t rows = out.rows(), cols = out.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = out.row(r);
    const T m = *std::max_element(row.begin(), row.end());
    T s{0};
    for (T v : row) s += std::exp(v - m);
    const T lse = m + std::log(s);
    for (T& v : row) v -= lse;
  }
  const std::size_t ix = x.id();
  const std::size_t self = x.tape().size();
  return x.tape().record(std::move(out), {x}, [ix, self, rows, cols](Tape<T>& tape, const Tensor<T>& g) {
    const Tensor<T>& y = tape.value(self);
    Tensor<T> d(y.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      T total{0};
      for (std::size_t c = 0; c < cols; ++c) total += g[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) {
        d[r * cols + c] = g[r * cols + c] - std::exp(y[r * cols + c]) * total;
      }
    }
    tape.accumulate(ix, d);
  });
}

template <typename T>
Var<T> causal_softmax(const Var<T>& scores) {
  require_rank2(scores, "causal_softmax");
  const std::size_t n = scores.shape()[0];
  if (scores.shape()[1] != n) throw ShapeError("causal_softmax: scores must be square");
  Tensor<T> out(Shape{n, n});
  for (std::size_t r = 0; r < n; ++r) {
    const T* in = scores.value().data().data() + r * n;
    T* o = out.data().data() + r * n;
    T m = in[0];
    for (std::size_t c = 1; c <= r; ++c) m = std::max(m, in[c]);
    T s{0};
    for (std::size_t c = 0; c <= r; ++c) {
      o[c] = std::exp(in[c] - m);
      s += o[c];
    }
    for (std::size_t c = 0; c <= r; ++c) o[c] /= s;
  }
  const std::size_t ix = scores.id();
  const std::size_t self = scores.tape().size();
  return scores.tape().record(std::move(out), {scores}, [ix, self, n](Tape<T>& tape, const Tensor<T>& g) {
    const Tensor<T>& y = tape.value(self);
    Tensor<T> d(y.shape());
    for (std::size_t r = 0; r < n; ++r) {
      T dot{0};
      for (std::size_t c = 0; c <= r; ++c) dot += g[r * n + c] * y[r * n + c];
      for (std::size_t c = 0; c <= r; ++c) d[r * n + c] = y[r * n + c] * (g[r * n + c] - dot);
    }
    tape.accumulate(ix, d);
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
  const std::size_t rows = x.value().rows(), cols = x.value().cols();
  if (gain.value().numel() != cols || bias.value().numel() != cols) {
    throw ShapeError("layer_norm: gain/bias width does not match " + shape_string(x.shape()));
  }
  Tensor<T> out(x.shape());
  Tensor<T> xhat(x.shape());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.value().data().data() + r * cols;
    T mu{0};
    for (std::size_t c = 0; c < cols; ++c) mu += in[c];
    mu /= static_cast<T>(cols);
    T var{0};
    for (std::size_t c = 0; c < cols; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<T>(cols);
    const T inv = T{1} / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t c = 0; c < cols; ++c) {
      const T h = (in[c] - mu) * inv;
      xhat[r * cols + c] = h;
      out[r * cols + c] = h * gain.value()[c] + bias.value()[c];
    }
  }
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().record(
      std::move(out), {x, gain, bias},
      [ix, ig, ib, rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape<T>& tape, const Tensor<T>& g) {
        const Tensor<T>& gv = tape.value(ig);
        if (tape.requires_grad(ig) || tape.requires_grad(ib)) {
          Tensor<T> dg(Shape{cols}), db(Shape{cols});
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) {
              dg[c] += g[r * cols + c] * xhat[r * cols + c];
              db[c] += g[r * cols + c];
            }
          }
          tape.accumulate(ig, dg);
          tape.accumulate(ib, db);
        }
        if (tape.requires_grad(ix)) {
          Tensor<T> dx(xhat.shape());
          std::vector<T> dh(cols);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_dh{0}, mean_dh_xh{0};
            for (std::size_t c = 0; c < cols; ++c) {
              dh[c] = g[r * cols + c] * gv[c];
              mean_dh += dh[c];
              mean_dh_xh += dh[c] * xhat[r * cols + c];
            }
            mean_dh /= static_cast<T>(cols);
            mean_dh_xh /= static_cast<T>(cols);
            for (std::size_t c = 0; c < cols; ++c) {
              dx[r * cols + c] = inv_std[r] * (dh[c] - mean_dh - xhat[r * cols + c] * mean_dh_xh);
            }
          }
          tape.accumulate(ix, dx);
        }
      });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2 / pi)
  constexpr T kA = T(0.044715);
  Tensor<T> out = x.value();
  for (T& v : out.data()) {
    const T t = std::tanh(kC * (v + kA * v * v * v));
    v = T(0.5) * v * (T(1) + t);
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape<T>& tape, const Tensor<T>& g) {
    const Tensor<T>& xv = tape.value(ix);
    Tensor<T> d(xv.shape());
    for (std::size_t i = 0; i < d.numel(); ++i) {
      const T v = xv[i];
      const T t = std::tanh(kC * (v + kA * v * v * v));
      const T dt = (T(1) - t * t) * kC * (T(1) + T(3) * kA * v * v);
      d[i] = g[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * dt);
    }
    tape.accumulate(ix, d);
  });
}

template <typename T>
Var<T> exp(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (T& v : out.data()) v = std::exp(v);
  const std::size_t ix = x.id();
  const std::size_t self = x.tape().size();
  return x.tape().record(std::move(out), {x}, [ix, self](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T> d = g;
    const Tensor<T>& y = tape.value(self);
    for (std::size_t i = 0; i < d.numel(); ++i) d[i] *= y[i];
    tape.accumulate(ix, d);
  });
}

template <typename T>
Var<T> log(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (T& v : out.data()) v = std::log(v);
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T> d = g;
    const Tensor<T>& xv = tape.value(ix);
    for (std::size_t i = 0; i < d.numel(); ++i) d[i] /= xv[i];
    tape.accumulate(ix, d);
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T total{0};
  for (T v : x.value().data()) total += v;
  const std::size_t ix = x.id();
  return x.tape().record(Tensor<T>::scalar(total), {x}, [ix](Tape<T>& tape, const Tensor<T>& g) {
    tape.accumulate(ix, Tensor<T>(tape.value(ix).shape(), g[0]));
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  const std::size_t n = x.value().numel();
  if (n == 0) throw ShapeError("mean of an empty tensor");
  T total{0};
  for (T v : x.value().data()) total += v;
  const std::size_t ix = x.id();
  return x.tape().record(Tensor<T>::scalar(total / static_cast<T>(n)), {x},
                         [ix, n](Tape<T>& tape, const Tensor<T>& g) {
                           tape.accumulate(ix, Tensor<T>(tape.value(ix).shape(), g[0] / static_cast<T>(n)));
                         });
}

template <typename T>
Var<T> pick(const Var<T>& x, std::span<const TokenIndex> idx) {
  const std::size_t rows = x.value().rows(), cols = x.value().cols();
  if (idx.size() != rows) {
    throw ShapeError("pick: " + std::to_string(idx.size()) + " indices for " + std::to_string(rows) + " rows");
  }
  Tensor<T> out(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= cols) {
      throw IndexError("pick: index " + std::to_string(idx[r]) + " outside [0, " + std::to_string(cols) + ")");
    }
    out[r] = x.value()[r * cols + static_cast<std::size_t>(idx[r])];
  }
  std::vector<TokenIndex> saved(idx.begin(), idx.end());
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x},
                         [ix, cols, saved = std::move(saved)](Tape<T>& tape, const Tensor<T>& g) {
                           Tensor<T>& dx = tape.grad_buffer(ix);
                           for (std::size_t r = 0; r < saved.size(); ++r) {
                             dx[r * cols + static_cast<std::size_t>(saved[r])] += g[r];
                           }
                         });
}

template <typename T>
Var<T> mask_cols(const Var<T>& x, std::span<const TokenIndex> mask) {
  const std::size_t rows = x.value().rows(), cols = x.value().cols();
  for (TokenIndex c : mask) {
    if (c < 0 || static_cast<std::size_t>(c) >= cols) {
      throw IndexError("mask_cols: column " + std::to_string(c) + " outside [0, " + std::to_string(cols) + ")");
    }
  }
  Tensor<T> out = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    for (TokenIndex c : mask) out[r * cols + static_cast<std::size_t>(c)] = static_cast<T>(kMaskedLogit);
  }
  std::vector<TokenIndex> saved(mask.begin(), mask.end());
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x},
                         [ix, rows, cols, saved = std::move(saved)](Tape<T>& tape, const Tensor<T>& g) {
                           Tensor<T> d = g;
                           for (std::size_t r = 0; r < rows; ++r) {
                             for (TokenIndex c : saved) d[r * cols + static_cast<std::size_t>(c)] = T{0};
                           }
                           tape.accumulate(ix, d);
                         });
}

template <typename T>
Var<T> clamp(const Var<T>& x, T lo, T hi) {
  if (!(lo <= hi)) throw DomainError("clamp: lo > hi");
  Tensor<T> out = x.value();
  for (T& v : out.data()) v = std::clamp(v, lo, hi);
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, lo, hi](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T> d = g;
    const Tensor<T>& xv = tape.value(ix);
    for (std::size_t i = 0; i < d.numel(); ++i) {
      if (xv[i] < lo || xv[i] > hi) d[i] = T{0};
    }
    tape.accumulate(ix, d);
  });
}

template <typename T>
Var<T> minimum(const Var<T>& a, const Var<T>& b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "minimum");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::min(out[i], b.value()[i]);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& tape, const Tensor<T>& g) {
    const Tensor<T>& av = tape.value(ia);
    const Tensor<T>& bv = tape.value(ib);
    Tensor<T> da(av.shape()), db(av.shape());
    for (std::size_t i = 0; i < av.numel(); ++i) {
      if (av[i] <= bv[i]) {
        da[i] = g[i];
      } else {
        db[i] = g[i];
      }
    }
    tape.accumulate(ia, da);
    tape.accumulate(ib, db);
  });
}

template <typename T>
Var<T> kl_rows(const Var<T>& logp, const Var<T>& logq) {
  require_same_tape(logp, logq);
  require_same_shape(logp, logq, "kl_rows");
  const std::size_t rows = logp.value().rows(), cols = logp.value().cols();
  Tensor<T> out(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    T acc{0};
    for (std::size_t c = 0; c < cols; ++c) {
      const T lp = logp.value()[r * cols + c];
      const T p = std::exp(lp);
      if (p == T{0}) continue;
      acc += p * (lp - logq.value()[r * cols + c]);
    }
    out[r] = acc;
  }
  const std::size_t ip = logp.id(), iq = logq.id();
  return logp.tape().record(std::move(out), {logp, logq},
                            [ip, iq, rows, cols](Tape<T>& tape, const Tensor<T>& g) {
                              const Tensor<T>& lp = tape.value(ip);
                              const Tensor<T>& lq = tape.value(iq);
                              Tensor<T> dp(lp.shape()), dq(lp.shape());
                              for (std::size_t r = 0; r < rows; ++r) {
                                for (std::size_t c = 0; c < cols; ++c) {
                                  const std::size_t i = r * cols + c;
                                  const T p = std::exp(lp[i]);
                                  if (p == T{0}) continue;
                                  dp[i] = g[r] * p * (lp[i] - lq[i] + T{1});
                                  dq[i] = -g[r] * p;
                                }
                              }
                              tape.accumulate(ip, dp);
                              tape.accumulate(iq, dq);
                            });
}

#define IPA_INSTANTIATE_OPS(T)                                                             \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                   \
  template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                   \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                   \
  template Var<T> scale<T>(const Var<T>&, T);                                             \
  template Var<T> add_row<T>(const Var<T>&, const Var<T>&);                               \
  template Var<T> matmul<T>(const Var<T>&, const Var<T>&);                                \
  template Var<T> matmul_nt<T>(const Var<T>&, const Var<T>&);                             \
  template Var<T> gather_rows<T>(const Var<T>&, std::span<const TokenIndex>);             \
  template Var<T> slice_rows<T>(const Var<T>&, std::size_t, std::size_t);                 \
  template Var<T> slice_cols<T>(const Var<T>&, std::size_t, std::size_t);                 \
  template Var<T> concat_rows<T>(std::span<const Var<T>>);                                \
  template Var<T> concat_cols<T>(std::span<const Var<T>>);                                \
  template Var<T> softmax<T>(const Var<T>&);                                              \
  template Var<T> log_softmax<T>(const Var<T>&);                                          \
  template Var<T> causal_softmax<T>(const Var<T>&);                                       \
  template Var<T> layer_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, T);          \
  template Var<T> gelu<T>(const Var<T>&);                                                 \
  template Var<T> exp<T>(const Var<T>&);                                                  \
  template Var<T> log<T>(const Var<T>&);                                                  \
  template Var<T> sum<T>(const Var<T>&);                                                  \
  template Var<T> mean<T>(const Var<T>&);                                                 \
  template Var<T> pick<T>(const Var<T>&, std::span<const TokenIndex>);                    \
  template Var<T> mask_cols<T>(const Var<T>&, std::span<const TokenIndex>);               \
  template Var<T> clamp<T>(const Var<T>&, T, T);                                          \
  template Var<T> minimum<T>(const Var<T>&, const Var<T>&);                               \
  template Var<T> kl_rows<T>(const Var<T>&, const Var<T>&);

IPA_INSTANTIATE_OPS(float)
IPA_INSTANTIATE_OPS(double)

#undef IPA_INSTANTIATE_OPS

}  // namespace ipa::ops
