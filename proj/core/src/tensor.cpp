#include "dlmlab/tensor.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "dlmlab/parallel.hpp"

namespace dlmlab {

namespace {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<Mat<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const Mat<S>>;
using OuterStride = Eigen::OuterStride<Eigen::Dynamic>;
template <typename S>
using BlockMap = Eigen::Map<Mat<S>, 0, OuterStride>;
template <typename S>
using ConstBlockMap = Eigen::Map<const Mat<S>, 0, OuterStride>;

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ')';
  return os.str();
}

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

template <typename S>
std::shared_ptr<detail::Node<S>> make_node(Shape shape,
                                           std::vector<std::shared_ptr<detail::Node<S>>> parents) {
  auto n = std::make_shared<detail::Node<S>>();
  n->shape = std::move(shape);
  n->value.resize(static_cast<std::size_t>(shape_numel(n->shape)));
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
  if (n->requires_grad) n->parents = std::move(parents);
  return n;
}

template <typename S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

}  // namespace

// ---------------------------------------------------------------- creation

template <typename S>
Tensor<S> Tensor<S>::zeros(Shape shape, bool requires_grad) {
  return constant(std::move(shape), S{0}, requires_grad);
}

template <typename S>
Tensor<S> Tensor<S>::constant(Shape shape, S value, bool requires_grad) {
  auto n = std::make_shared<detail::Node<S>>();
  n->shape = std::move(shape);
  n->value.assign(static_cast<std::size_t>(shape_numel(n->shape)), value);
  n->requires_grad = requires_grad;
  return Tensor<S>(std::move(n));
}

template <typename S>
Tensor<S> Tensor<S>::from(Shape shape, std::vector<S> values, bool requires_grad) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw std::invalid_argument("Tensor::from: " + shape_str(shape) + " needs " +
                                std::to_string(shape_numel(shape)) + " values, got " +
                                std::to_string(values.size()));
  }
  auto n = std::make_shared<detail::Node<S>>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor<S>(std::move(n));
}

template <typename S>
Tensor<S> Tensor<S>::randn(Shape shape, double stddev, Rng rng, bool requires_grad) {
  auto t = zeros(std::move(shape), requires_grad);
  auto v = t.raw();
  for (auto& x : v) x = static_cast<S>(rng.normal() * stddev);
  return t;
}

template <typename S>
S Tensor<S>::item() const {
  if (!defined() || numel() != 1) throw std::invalid_argument("Tensor::item: not a scalar");
  return node_->value[0];
}

// ------------------------------------------------------------- elementwise

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "add");
  auto out = make_node<S>(a.shape(), {a.handle(), b.handle()});
  const S* pa = a.values().data();
  const S* pb = b.values().data();
  S* po = out->value.data();
  parallel_chunks(out->numel(), [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i) po[i] = pa[i] + pb[i];
  });
  if (out->requires_grad) {
    auto* na = a.node();
    auto* nb = b.node();
    out->backward_fn = [na, nb](detail::Node<S>& self) {
      for (auto* p : {na, nb}) {
        if (!p->requires_grad) continue;
        p->ensure_grad();
        S* g = p->grad.data();
        const S* go = self.grad.data();
        parallel_chunks(self.numel(), [&](std::int64_t lo, std::int64_t hi) {
          for (std::int64_t i = lo; i < hi; ++i) g[i] += go[i];
        });
      }
    };
  }
  return Tensor<S>(std::move(out));
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "mul");
  auto out = make_node<S>(a.shape(), {a.handle(), b.handle()});
  const S* pa = a.values().data();
  const S* pb = b.values().data();
  S* po = out->value.data();
  parallel_chunks(out->numel(), [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i) po[i] = pa[i] * pb[i];
  });
  if (out->requires_grad) {
    auto* na = a.node();
    auto* nb = b.node();
    out->backward_fn = [na, nb](detail::Node<S>& self) {
      const S* go = self.grad.data();
      if (na->requires_grad) {
        na->ensure_grad();
        S* g = na->grad.data();
        const S* other = nb->value.data();
        parallel_chunks(self.numel(), [&](std::int64_t lo, std::int64_t hi) {
          for (std::int64_t i = lo; i < hi; ++i) g[i] += go[i] * other[i];
        });
      }
      if (nb->requires_grad) {
        nb->ensure_grad();
        S* g = nb->grad.data();
        const S* other = na->value.data();
        parallel_chunks(self.numel(), [&](std::int64_t lo, std::int64_t hi) {
          for (std::int64_t i = lo; i < hi; ++i) g[i] += go[i] * other[i];
        });
      }
    };
  }
  return Tensor<S>(std::move(out));
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  auto out = make_node<S>(a.shape(), {a.handle()});
  const S* pa = a.values().data();
  S* po = out->value.data();
  parallel_chunks(out->numel(), [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i) po[i] = pa[i] * factor;
  });
  if (out->requires_grad) {
    auto* na = a.node();
    out->backward_fn = [na, factor](detail::Node<S>& self) {
      na->ensure_grad();
      S* g = na->grad.data();
      const S* go = self.grad.data();
      parallel_chunks(self.numel(), [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) g[i] += go[i] * factor;
      });
    };
  }
  return Tensor<S>(std::move(out));
}

template <typename S>
Tensor<S> silu(const Tensor<S>& x) {
  auto out = make_node<S>(x.shape(), {x.handle()});
  const S* px = x.values().data();
  S* po = out->value.data();
  parallel_chunks(out->numel(), [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i) {
      const S sig = S{1} / (S{1} + std::exp(-px[i]));
      po[i] = px[i] * sig;
    }
  });
  if (out->requires_grad) {
    auto* nx = x.node();
    out->backward_fn = [nx](detail::Node<S>& self) {
      nx->ensure_grad();
      S* g = nx->grad.data();
      const S* go = self.grad.data();
      const S* px = nx->value.data();
      parallel_chunks(self.numel(), [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) {
          const S sig = S{1} / (S{1} + std::exp(-px[i]));
          g[i] += go[i] * sig * (S{1} + px[i] * (S{1} - sig));
        }
      });
    };
  }
  return Tensor<S>(std::move(out));
}

// ------------------------------------------------------------------ matmul

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: shape mismatch " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = make_node<S>({m, n}, {a.handle(), b.handle()});
  ConstMatMap<S> ma(a.values().data(), m, k);
  ConstMatMap<S> mb(b.values().data(), k, n);
  MatMap<S> mo(out->value.data(), m, n);
  parallel_chunks(m, [&](std::int64_t lo, std::int64_t hi) {
    mo.middleRows(lo, hi - lo).noalias() = ma.middleRows(lo, hi - lo) * mb;
  });
  if (out->requires_grad) {
    auto* na = a.node();
    auto* nb = b.node();
    out->backward_fn = [na, nb, m, k, n](detail::Node<S>& self) {
      ConstMatMap<S> go(self.grad.data(), m, n);
      if (na->requires_grad) {
        na->ensure_grad();
        MatMap<S> ga(na->grad.data(), m, k);
        ConstMatMap<S> vb(nb->value.data(), k, n);
        parallel_chunks(m, [&](std::int64_t lo, std::int64_t hi) {
          ga.middleRows(lo, hi - lo).noalias() += go.middleRows(lo, hi - lo) * vb.transpose();
        });
      }
      if (nb->requires_grad) {
        nb->ensure_grad();
        MatMap<S> gb(nb->grad.data(), k, n);
        ConstMatMap<S> va(na->value.data(), m, k);
        parallel_chunks(n, [&](std::int64_t lo, std::int64_t hi) {
          gb.middleCols(lo, hi - lo).noalias() += va.transpose() * go.middleCols(lo, hi - lo);
        });
      }
    };
  }
  return Tensor<S>(std::move(out));
}

template <typename S>
Tensor<S> add_row_bias(const Tensor<S>& x, const Tensor<S>& bias) {
  if (x.shape().size() != 2 || bias.shape().size() != 1 || x.dim(1) != bias.dim(0)) {
    throw std::invalid_argument("add_row_bias: shape mismatch " + shape_str(x.shape()) + " + " +
                                shape_str(bias.shape()));
  }
  const std::int64_t rows = x.dim(0), d = x.dim(1);
  auto out = make_node<S>(x.shape(), {x.handle(), bias.handle()});
  const S* px = x.values().data();
  const S* pb = bias.values().data();
  S* po = out->value.data();
  parallel_chunks(rows, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t r = lo; r < hi; ++r)
      for (std::int64_t c = 0; c < d; ++c) po[r * d + c] = px[r * d + c] + pb[c];
  });
  if (out->requires_grad) {
    auto* nx = x.node();
    auto* nb = bias.node();
    out->backward_fn = [nx, nb, rows, d](detail::Node<S>& self) {
      const S* go = self.grad.data();
      if (nx->requires_grad) {
        nx->ensure_grad();
        S* g = nx->grad.data();
        parallel_chunks(rows * d, [&](std::int64_t lo, std::int64_t hi) {
          for (std::int64_t i = lo; i < hi; ++i) g[i] += go[i];
        });
      }
      if (nb->requires_grad) {
        nb->ensure_grad();
        S* g = nb->grad.data();
        parallel_chunks(d, [&](std::int64_t lo, std::int64_t hi) {
          for (std::int64_t c = lo; c < hi; ++c) {
            S acc{0};
            for (std::int64_t r = 0; r < rows; ++r) acc += go[r * d + c];
            g[c] += acc;
          }
        });
      }
    };
  }
  return Tensor<S>(std::move(out));
}

// ---------------------------------------------------------------- rms_norm

template <typename S>
Tensor<S> rms_norm(const Tensor<S>& x, const Tensor<S>& gain, double eps) {
  const std::int64_t group = gain.numel();
  if (group <= 0 || x.numel() % group != 0) {
    throw std::invalid_argument("rms_norm: " + shape_str(x.shape()) +
                                " is not a multiple of gain " + shape_str(gain.shape()));
  }
  const std::int64_t rows = x.numel() / group;
  auto out = make_node<S>(x.shape(), {x.handle(), gain.handle()});
  const S* px = x.values().data();
  const S* pg = gain.values().data();
  S* po = out->value.data();
  auto inv_rms = std::make_shared<std::vector<S>>(static_cast<std::size_t>(rows));
  S* pr = inv_rms->data();
  parallel_chunks(rows, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t r = lo; r < hi; ++r) {
      const S* row = px + r * group;
      S ss{0};
      for (std::int64_t c = 0; c < group; ++c) ss += row[c] * row[c];
      const S inv = S{1} / std::sqrt(ss / static_cast<S>(group) + static_cast<S>(eps));
      pr[r] = inv;
      S* orow = po + r * group;
      for (std::int64_t c = 0; c < group; ++c) orow[c] = row[c] * pg[c] * inv;
    }
  });
  if (out->requires_grad) {
    auto* nx = x.node();
    auto* ng = gain.node();
    out->backward_fn = [nx, ng, rows, group, inv_rms](detail::Node<S>& self) {
      const S* go = self.grad.data();
      const S* px = nx->value.data();
      const S* pg = ng->value.data();
      const S* pr = inv_rms->data();
      if (nx->requires_grad) {
        nx->ensure_grad();
        S* g = nx->grad.data();
        parallel_chunks(rows, [&](std::int64_t lo, std::int64_t hi) {
          for (std::int64_t r = lo; r < hi; ++r) {
            const S* row = px + r * group;
            const S* grow = go + r * group;
            const S inv = pr[r];
            S dot{0};
            for (std::int64_t c = 0; c < group; ++c) dot += grow[c] * pg[c] * row[c];
            const S k = inv * inv * inv * dot / static_cast<S>(group);
            S* xg = g + r * group;
            for (std::int64_t c = 0; c < group; ++c) xg[c] += grow[c] * pg[c] * inv - row[c] * k;
          }
        });
      }
      if (ng->requires_grad) {
        ng->ensure_grad();
        S* g = ng->grad.data();
        parallel_chunks(group, [&](std::int64_t lo, std::int64_t hi) {
          for (std::int64_t c = lo; c < hi; ++c) {
            S acc{0};
            for (std::int64_t r = 0; r < rows; ++r) acc += go[r * group + c] * px[r * group + c] * pr[r];
            g[c] += acc;
          }
        });
      }
    };
  }
  return Tensor<S>(std::move(out));
}

// --------------------------------------------------------------- embedding

template <typename S>
Tensor<S> embedding(const Tensor<S>& table, std::span<const std::int32_t> ids) {
  if (table.shape().size() != 2) {
    throw std::invalid_argument("embedding: table must be 2-D, got " + shape_str(table.shape()));
  }
  const std::int64_t vocab = table.dim(0), d = table.dim(1);
  for (auto id : ids) {
    if (id < 0 || id >= vocab) {
      throw std::invalid_argument("embedding: id " + std::to_string(id) + " outside vocab " +
                                  std::to_string(vocab));
    }
  }
  const std::int64_t rows = static_cast<std::int64_t>(ids.size());
  auto out = make_node<S>({rows, d}, {table.handle()});
  const S* pt = table.values().data();
  S* po = out->value.data();
  auto idv = std::make_shared<std::vector<std::int32_t>>(ids.begin(), ids.end());
  const std::int32_t* pid = idv->data();
  parallel_chunks(rows, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t r = lo; r < hi; ++r)
      std::memcpy(po + r * d, pt + static_cast<std::int64_t>(pid[r]) * d,
                  static_cast<std::size_t>(d) * sizeof(S));
  });
  if (out->requires_grad) {
    auto* nt = table.node();
    out->backward_fn = [nt, rows, d, idv](detail::Node<S>& self) {
      nt->ensure_grad();
      S* g = nt->grad.data();
      const S* go = self.grad.data();
      const std::int32_t* pid = idv->data();
      // Column chunks keep the row accumulation order fixed per column.
      parallel_chunks(d, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t r = 0; r < rows; ++r) {
          S* dst = g + static_cast<std::int64_t>(pid[r]) * d;
          const S* src = go + r * d;
          for (std::int64_t c = lo; c < hi; ++c) dst[c] += src[c];
        }
      });
    };
  }
  return Tensor<S>(std::move(out));
}

// -------------------------------------------------------------------- rope

namespace {

template <typename S>
std::vector<S> rope_angles(std::int64_t seq, std::int64_t half, double base) {
  // cos/sin packed per (position, pair index).
  std::vector<S> table(static_cast<std::size_t>(seq * half * 2));
  for (std::int64_t p = 0; p < seq; ++p) {
    for (std::int64_t i = 0; i < half; ++i) {
      const double angle =
          static_cast<double>(p) * std::pow(base, -2.0 * static_cast<double>(i) / (2.0 * half));
      table[static_cast<std::size_t>((p * half + i) * 2)] = static_cast<S>(std::cos(angle));
      table[static_cast<std::size_t>((p * half + i) * 2 + 1)] = static_cast<S>(std::sin(angle));
    }
  }
  return table;
}

}  // namespace

template <typename S>
Tensor<S> rope(const Tensor<S>& x, std::int64_t batch, std::int64_t seq, std::int64_t heads,
               double base) {
  if (x.shape().size() != 2 || x.dim(0) != batch * seq || x.dim(1) % heads != 0 ||
      (x.dim(1) / heads) % 2 != 0) {
    throw std::invalid_argument("rope: bad layout " + shape_str(x.shape()) + " for batch " +
                                std::to_string(batch) + " seq " + std::to_string(seq) + " heads " +
                                std::to_string(heads));
  }
  const std::int64_t d = x.dim(1);
  const std::int64_t head_dim = d / heads;
  const std::int64_t half = head_dim / 2;
  auto out = make_node<S>(x.shape(), {x.handle()});
  const auto table = rope_angles<S>(seq, half, base);
  const S* px = x.values().data();
  S* po = out->value.data();
  const S* tab = table.data();
  parallel_chunks(batch * seq, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t r = lo; r < hi; ++r) {
      const std::int64_t pos = r % seq;
      const S* xr = px + r * d;
      S* orow = po + r * d;
      for (std::int64_t h = 0; h < heads; ++h) {
        const S* xh = xr + h * head_dim;
        S* oh = orow + h * head_dim;
        for (std::int64_t i = 0; i < half; ++i) {
          const S c = tab[(pos * half + i) * 2];
          const S s = tab[(pos * half + i) * 2 + 1];
          oh[i] = xh[i] * c - xh[i + half] * s;
          oh[i + half] = xh[i] * s + xh[i + half] * c;
        }
      }
    }
  });
  if (out->requires_grad) {
    auto* nx = x.node();
    out->backward_fn = [nx, batch, seq, heads, head_dim, half, d, base](detail::Node<S>& self) {
      nx->ensure_grad();
      S* g = nx->grad.data();
      const S* go = self.grad.data();
      const auto table = rope_angles<S>(seq, half, base);
      const S* tab = table.data();
      parallel_chunks(batch * seq, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t r = lo; r < hi; ++r) {
          const std::int64_t pos = r % seq;
          const S* grow = go + r * d;
          S* xg = g + r * d;
          for (std::int64_t h = 0; h < heads; ++h) {
            const S* gh = grow + h * head_dim;
            S* xh = xg + h * head_dim;
            for (std::int64_t i = 0; i < half; ++i) {
              const S c = tab[(pos * half + i) * 2];
              const S s = tab[(pos * half + i) * 2 + 1];
              xh[i] += gh[i] * c + gh[i + half] * s;
              xh[i + half] += -gh[i] * s + gh[i + half] * c;
            }
          }
        }
      });
    };
  }
  return Tensor<S>(std::move(out));
}

// --------------------------------------------------------------- attention

template <typename S>
Tensor<S> attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                    std::int64_t batch, std::int64_t seq, std::int64_t heads, bool causal,
                    double dropout_p, Rng rng) {
  check_same_shape(q, k, "attention");
  check_same_shape(q, v, "attention");
  if (q.shape().size() != 2 || q.dim(0) != batch * seq || q.dim(1) % heads != 0) {
    throw std::invalid_argument("attention: bad layout " + shape_str(q.shape()));
  }
  if (dropout_p < 0.0 || dropout_p >= 1.0) {
    throw std::invalid_argument("attention: dropout_p must be in [0,1)");
  }
  const std::int64_t d = q.dim(1);
  const std::int64_t head_dim = d / heads;
  const std::int64_t bh = batch * heads;
  const S scale_f = static_cast<S>(1.0 / std::sqrt(static_cast<double>(head_dim)));
  auto out = make_node<S>(q.shape(), {q.handle(), k.handle(), v.handle()});
  const bool track = out->requires_grad;
  const bool use_dropout = dropout_p > 0.0;
  const S keep_inv = static_cast<S>(1.0 / (1.0 - dropout_p));

  // Probabilities (pre-dropout) and keep mask saved for the backward pass.
  auto probs = std::make_shared<std::vector<S>>();
  auto keep = std::make_shared<std::vector<std::uint8_t>>();
  if (track) probs->assign(static_cast<std::size_t>(bh * seq * seq), S{0});
  if (track && use_dropout) keep->assign(static_cast<std::size_t>(bh * seq * seq), std::uint8_t{1});

  const S* pq = q.values().data();
  const S* pk = k.values().data();
  const S* pv = v.values().data();
  S* po = out->value.data();

  parallel_chunks(bh, [&](std::int64_t lo, std::int64_t hi) {
    Mat<S> scores(seq, seq);
    Mat<S> pmat(seq, seq);
    for (std::int64_t g = lo; g < hi; ++g) {
      const std::int64_t b = g / heads, h = g % heads;
      const std::int64_t row0 = b * seq;
      const std::int64_t col0 = h * head_dim;
      ConstBlockMap<S> bq(pq + row0 * d + col0, seq, head_dim, OuterStride(d));
      ConstBlockMap<S> bk(pk + row0 * d + col0, seq, head_dim, OuterStride(d));
      ConstBlockMap<S> bv(pv + row0 * d + col0, seq, head_dim, OuterStride(d));
      scores.noalias() = bq * bk.transpose();
      Rng drop_rng = rng.fork(static_cast<std::uint64_t>(g));
      for (std::int64_t i = 0; i < seq; ++i) {
        const std::int64_t lim = causal ? i + 1 : seq;
        S* srow = scores.data() + i * seq;
        S mx = srow[0] * scale_f;
        for (std::int64_t j = 1; j < lim; ++j) mx = std::max(mx, srow[j] * scale_f);
        S denom{0};
        S* prow = pmat.data() + i * seq;
        for (std::int64_t j = 0; j < lim; ++j) {
          prow[j] = std::exp(srow[j] * scale_f - mx);
          denom += prow[j];
        }
        const S inv = S{1} / denom;
        for (std::int64_t j = 0; j < lim; ++j) prow[j] *= inv;
        for (std::int64_t j = lim; j < seq; ++j) prow[j] = S{0};
        if (track) {
          std::memcpy(probs->data() + (g * seq + i) * seq, prow,
                      static_cast<std::size_t>(seq) * sizeof(S));
        }
        if (use_dropout) {
          std::uint8_t* krow = track ? keep->data() + (g * seq + i) * seq : nullptr;
          for (std::int64_t j = 0; j < lim; ++j) {
            const bool kept = drop_rng.uniform() >= dropout_p;
            if (krow) krow[j] = kept ? 1 : 0;
            prow[j] = kept ? prow[j] * keep_inv : S{0};
          }
        }
      }
      BlockMap<S> bo(po + row0 * d + col0, seq, head_dim, OuterStride(d));
      bo.noalias() = pmat * bv;
    }
  });

  if (track) {
    auto* nq = q.node();
    auto* nk = k.node();
    auto* nv = v.node();
    out->backward_fn = [nq, nk, nv, probs, keep, batch, seq, heads, head_dim, d, bh, scale_f,
                        use_dropout, keep_inv, causal](detail::Node<S>& self) {
      for (auto* p : {nq, nk, nv})
        if (p->requires_grad) p->ensure_grad();
      const S* pq = nq->value.data();
      const S* pk = nk->value.data();
      const S* pv = nv->value.data();
      const S* go = self.grad.data();
      parallel_chunks(bh, [&](std::int64_t lo, std::int64_t hi) {
        Mat<S> ptilde(seq, seq);
        Mat<S> dp(seq, seq);
        Mat<S> ds(seq, seq);
        for (std::int64_t g = lo; g < hi; ++g) {
          const std::int64_t b = g / heads, h = g % heads;
          const std::int64_t row0 = b * seq;
          const std::int64_t col0 = h * head_dim;
          ConstBlockMap<S> bq(pq + row0 * d + col0, seq, head_dim, OuterStride(d));
          ConstBlockMap<S> bk(pk + row0 * d + col0, seq, head_dim, OuterStride(d));
          ConstBlockMap<S> bv(pv + row0 * d + col0, seq, head_dim, OuterStride(d));
          ConstBlockMap<S> gout(go + row0 * d + col0, seq, head_dim, OuterStride(d));
          ConstMatMap<S> p(probs->data() + g * seq * seq, seq, seq);
          if (use_dropout) {
            const std::uint8_t* km = keep->data() + g * seq * seq;
            for (std::int64_t i = 0; i < seq * seq; ++i)
              ptilde.data()[i] = km[i] ? p.data()[i] * keep_inv : S{0};
          } else {
            ptilde = p;
          }
          if (nv->requires_grad) {
            BlockMap<S> gv(nv->grad.data() + row0 * d + col0, seq, head_dim, OuterStride(d));
            gv.noalias() += ptilde.transpose() * gout;
          }
          dp.noalias() = gout * bv.transpose();
          if (use_dropout) {
            const std::uint8_t* km = keep->data() + g * seq * seq;
            for (std::int64_t i = 0; i < seq * seq; ++i)
              dp.data()[i] = km[i] ? dp.data()[i] * keep_inv : S{0};
          }
          // softmax backward per row: ds = p .* (dp - rowsum(dp .* p))
          for (std::int64_t i = 0; i < seq; ++i) {
            const std::int64_t lim = causal ? i + 1 : seq;
            const S* prow = p.data() + i * seq;
            const S* dprow = dp.data() + i * seq;
            S dot{0};
            for (std::int64_t j = 0; j < lim; ++j) dot += dprow[j] * prow[j];
            S* dsrow = ds.data() + i * seq;
            for (std::int64_t j = 0; j < lim; ++j) dsrow[j] = prow[j] * (dprow[j] - dot) * scale_f;
            for (std::int64_t j = lim; j < seq; ++j) dsrow[j] = S{0};
          }
          if (nq->requires_grad) {
            BlockMap<S> gq(nq->grad.data() + row0 * d + col0, seq, head_dim, OuterStride(d));
            gq.noalias() += ds * bk;
          }
          if (nk->requires_grad) {
            BlockMap<S> gk(nk->grad.data() + row0 * d + col0, seq, head_dim, OuterStride(d));
            gk.noalias() += ds.transpose() * bq;
          }
        }
      });
    };
  }
  return Tensor<S>(std::move(out));
}

// ----------------------------------------------------------------- dropout

template <typename S>
Tensor<S> dropout(const Tensor<S>& x, double p, Rng rng) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0,1)");
  if (p == 0.0) return scale(x, S{1});
  auto out = make_node<S>(x.shape(), {x.handle()});
  const S keep_inv = static_cast<S>(1.0 / (1.0 - p));
  auto keep = std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(out->numel()));
  const S* px = x.values().data();
  S* po = out->value.data();
  std::uint8_t* km = keep->data();
  parallel_chunks(out->numel(), [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i) {
      const bool kept = rng.fork(static_cast<std::uint64_t>(i)).uniform() >= p;
      km[i] = kept ? 1 : 0;
      po[i] = kept ? px[i] * keep_inv : S{0};
    }
  });
  if (out->requires_grad) {
    auto* nx = x.node();
    out->backward_fn = [nx, keep, keep_inv](detail::Node<S>& self) {
      nx->ensure_grad();
      S* g = nx->grad.data();
      const S* go = self.grad.data();
      const std::uint8_t* km = keep->data();
      parallel_chunks(self.numel(), [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i)
          if (km[i]) g[i] += go[i] * keep_inv;
      });
    };
  }
  return Tensor<S>(std::move(out));
}

// --------------------------------------------------------------------- sum

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  auto out = make_node<S>({1}, {x.handle()});
  double acc = 0.0;
  for (S v : x.values()) acc += static_cast<double>(v);
  out->value[0] = static_cast<S>(acc);
  if (out->requires_grad) {
    auto* nx = x.node();
    out->backward_fn = [nx](detail::Node<S>& self) {
      nx->ensure_grad();
      S* g = nx->grad.data();
      const S go = self.grad[0];
      parallel_chunks(nx->numel(), [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) g[i] += go;
      });
    };
  }
  return Tensor<S>(std::move(out));
}

// --------------------------------------------------------- cross entropy

namespace {

// Writes nll[r] for rows with nonzero weight; returns per-row max-stabilized
// values computed in double.
template <typename S>
void rows_nll(const S* logits, std::int64_t rows, std::int64_t k,
              const std::int32_t* targets, const double* weights, double* nll) {
  parallel_chunks(rows, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t r = lo; r < hi; ++r) {
      if (weights[r] == 0.0) {
        nll[r] = 0.0;
        continue;
      }
      const S* row = logits + r * k;
      double mx = static_cast<double>(row[0]);
      for (std::int64_t c = 1; c < k; ++c) mx = std::max(mx, static_cast<double>(row[c]));
      double denom = 0.0;
      for (std::int64_t c = 0; c < k; ++c) denom += std::exp(static_cast<double>(row[c]) - mx);
      nll[r] = mx + std::log(denom) - static_cast<double>(row[targets[r]]);
    }
  });
}

template <typename S>
CrossEntropy<S> cross_entropy_impl(const Tensor<S>& logits, std::span<const std::int32_t> targets,
                                   std::vector<double> weights) {
  const std::int64_t rows = logits.dim(0), k = logits.dim(1);
  for (std::int64_t r = 0; r < rows; ++r) {
    if (weights[static_cast<std::size_t>(r)] != 0.0 &&
        (targets[static_cast<std::size_t>(r)] < 0 || targets[static_cast<std::size_t>(r)] >= k)) {
      throw std::invalid_argument("cross_entropy: target " +
                                  std::to_string(targets[static_cast<std::size_t>(r)]) +
                                  " outside [0," + std::to_string(k) + ") at row " +
                                  std::to_string(r));
    }
  }
  auto out = make_node<S>({1}, {logits.handle()});
  auto tgt = std::make_shared<std::vector<std::int32_t>>(targets.begin(), targets.end());
  auto wts = std::make_shared<std::vector<double>>(std::move(weights));
  std::vector<double> nll(static_cast<std::size_t>(rows));
  rows_nll(logits.values().data(), rows, k, tgt->data(), wts->data(), nll.data());
  double acc = 0.0;
  std::int64_t count = 0;
  for (std::int64_t r = 0; r < rows; ++r) {
    const double w = (*wts)[static_cast<std::size_t>(r)];
    if (w == 0.0) continue;
    acc += w * nll[static_cast<std::size_t>(r)];
    ++count;
  }
  out->value[0] = static_cast<S>(acc);
  if (out->requires_grad) {
    auto* nl = logits.node();
    out->backward_fn = [nl, tgt, wts, rows, k](detail::Node<S>& self) {
      nl->ensure_grad();
      S* g = nl->grad.data();
      const S* logits = nl->value.data();
      const double go = static_cast<double>(self.grad[0]);
      parallel_chunks(rows, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t r = lo; r < hi; ++r) {
          const double w = (*wts)[static_cast<std::size_t>(r)];
          if (w == 0.0) continue;
          const S* row = logits + r * k;
          S* grow = g + r * k;
          double mx = static_cast<double>(row[0]);
          for (std::int64_t c = 1; c < k; ++c) mx = std::max(mx, static_cast<double>(row[c]));
          double denom = 0.0;
          for (std::int64_t c = 0; c < k; ++c) denom += std::exp(static_cast<double>(row[c]) - mx);
          const double inv = 1.0 / denom;
          const double coeff = go * w;
          for (std::int64_t c = 0; c < k; ++c) {
            const double soft = std::exp(static_cast<double>(row[c]) - mx) * inv;
            grow[c] += static_cast<S>(coeff * soft);
          }
          grow[(*tgt)[static_cast<std::size_t>(r)]] -= static_cast<S>(coeff);
        }
      });
    };
  }
  CrossEntropy<S> result;
  result.loss = Tensor<S>(std::move(out));
  result.count = count;
  return result;
}

}  // namespace

template <typename S>
CrossEntropy<S> softmax_cross_entropy(const Tensor<S>& logits, std::span<const std::int32_t> targets,
                                      std::int32_t ignore_index) {
  if (logits.shape().size() != 2 || static_cast<std::size_t>(logits.dim(0)) != targets.size()) {
    throw std::invalid_argument("softmax_cross_entropy: logits " + shape_str(logits.shape()) +
                                " vs " + std::to_string(targets.size()) + " targets");
  }
  std::int64_t count = 0;
  for (auto t : targets)
    if (t != ignore_index) ++count;
  std::vector<double> weights(targets.size(), 0.0);
  if (count > 0) {
    const double w = 1.0 / static_cast<double>(count);
    for (std::size_t i = 0; i < targets.size(); ++i)
      if (targets[i] != ignore_index) weights[i] = w;
  }
  return cross_entropy_impl(logits, targets, std::move(weights));
}

template <typename S>
CrossEntropy<S> weighted_softmax_cross_entropy(const Tensor<S>& logits,
                                               std::span<const std::int32_t> targets,
                                               std::span<const double> weights) {
  if (logits.shape().size() != 2 || static_cast<std::size_t>(logits.dim(0)) != targets.size() ||
      targets.size() != weights.size()) {
    throw std::invalid_argument("weighted_softmax_cross_entropy: logits " +
                                shape_str(logits.shape()) + " vs " +
                                std::to_string(targets.size()) + " targets, " +
                                std::to_string(weights.size()) + " weights");
  }
  return cross_entropy_impl(logits, targets, std::vector<double>(weights.begin(), weights.end()));
}

template <typename S>
std::vector<double> row_nll(const Tensor<S>& logits, std::span<const std::int32_t> targets) {
  if (logits.shape().size() != 2 || static_cast<std::size_t>(logits.dim(0)) != targets.size()) {
    throw std::invalid_argument("row_nll: logits " + shape_str(logits.shape()) + " vs " +
                                std::to_string(targets.size()) + " targets");
  }
  const std::int64_t rows = logits.dim(0), k = logits.dim(1);
  std::vector<double> weights(targets.size(), 1.0);
  for (std::size_t i = 0; i < targets.size(); ++i)
    if (targets[i] < 0) weights[i] = 0.0;
  std::vector<double> nll(static_cast<std::size_t>(rows));
  rows_nll(logits.values().data(), rows, k, targets.data(), weights.data(), nll.data());
  return nll;
}

// ---------------------------------------------------------------- backward

template <typename S>
void backward(const Tensor<S>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be a defined scalar tensor");
  }
  auto* root = loss.node();
  if (!root->requires_grad) return;

  std::vector<detail::Node<S>*> topo;
  std::unordered_set<detail::Node<S>*> visited;
  struct Frame {
    detail::Node<S>* n;
    std::size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({root, 0});
  visited.insert(root);
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      detail::Node<S>* p = f.n->parents[f.next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      topo.push_back(f.n);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad[0] = S{1};
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    detail::Node<S>* n = *it;
    if (n->backward_fn) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

// ---------------------------------------------------- explicit instantiation

#define DLMLAB_INSTANTIATE_TENSOR(S)                                                             \
  template class Tensor<S>;                                                                      \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                    \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                                    \
  template Tensor<S> scale(const Tensor<S>&, S);                                                 \
  template Tensor<S> silu(const Tensor<S>&);                                                     \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                                 \
  template Tensor<S> add_row_bias(const Tensor<S>&, const Tensor<S>&);                           \
  template Tensor<S> rms_norm(const Tensor<S>&, const Tensor<S>&, double);                       \
  template Tensor<S> embedding(const Tensor<S>&, std::span<const std::int32_t>);                 \
  template Tensor<S> rope(const Tensor<S>&, std::int64_t, std::int64_t, std::int64_t, double);   \
  template Tensor<S> attention(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,             \
                               std::int64_t, std::int64_t, std::int64_t, bool, double, Rng);     \
  template Tensor<S> dropout(const Tensor<S>&, double, Rng);                                     \
  template Tensor<S> sum(const Tensor<S>&);                                                      \
  template CrossEntropy<S> softmax_cross_entropy(const Tensor<S>&,                               \
                                                 std::span<const std::int32_t>, std::int32_t);   \
  template CrossEntropy<S> weighted_softmax_cross_entropy(                                       \
      const Tensor<S>&, std::span<const std::int32_t>, std::span<const double>);                 \
  template std::vector<double> row_nll(const Tensor<S>&, std::span<const std::int32_t>);         \
  template void backward(const Tensor<S>&);

DLMLAB_INSTANTIATE_TENSOR(float)
DLMLAB_INSTANTIATE_TENSOR(double)

#undef DLMLAB_INSTANTIATE_TENSOR

}  // namespace dlmlab
