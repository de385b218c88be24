#include "polyprobe/core/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "polyprobe/core/error.hpp"

namespace polyprobe::core {

Var Tape::input(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, true, nullptr});
  return Var{nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, false, nullptr});
  return Var{nodes_.size() - 1};
}

Var Tape::input_ref(const Tensor& value) {
  nodes_.push_back(Node{Tensor(), {}, nullptr, true, &value});
  return Var{nodes_.size() - 1};
}

Var Tape::constant_ref(const Tensor& value) {
  nodes_.push_back(Node{Tensor(), {}, nullptr, false, &value});
  return Var{nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  bool needs = false;
  for (Var in : inputs) {
    require(in.id < nodes_.size(), ErrorCode::ShapeMismatch, "tape input refers to a future node");
    needs = needs || nodes_[in.id].requires_grad;
  }
  if (!needs) {
    backward = nullptr;
  }
  nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(backward), needs, nullptr});
  return Var{nodes_.size() - 1};
}

const Tensor& Gradients::at(Var v) const {
  if (!has(v)) {
    fail(ErrorCode::ShapeMismatch, "no gradient recorded for node " + std::to_string(v.id));
  }
  return *grads_[v.id];
}

Gradients backprop(const Tape& tape, Var seed) {
  require(seed.id < tape.nodes_.size(), ErrorCode::ShapeMismatch, "seed node not on tape");
  const Tensor& seed_value = tape.value(seed);
  if (seed_value.size() != 1) {
    fail(ErrorCode::NonScalarSeed, "seed has shape " + shape_string(seed_value.shape()));
  }

  Gradients result;
  result.grads_.resize(seed.id + 1);
  result.grads_[seed.id] = Tensor::filled(seed_value.shape(), 1.0);

  for (std::size_t id = seed.id + 1; id-- > 0;) {
    ++result.visited_;
    const auto& node = tape.nodes_[id];
    if (!result.grads_[id] || !node.backward) {
      continue;
    }
    std::vector<Tensor> local;
    local.reserve(node.inputs.size());
    for (Var in : node.inputs) {
      local.emplace_back(tape.value(in).shape());
    }
    node.backward(tape, *result.grads_[id], local);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const Var in = node.inputs[k];
      if (!tape.nodes_[in.id].requires_grad) {
        continue;
      }
      auto& slot = result.grads_[in.id];
      if (!slot) {
        slot = std::move(local[k]);
      } else {
        for (std::size_t i = 0; i < slot->size(); ++i) {
          (*slot)[i] += local[k][i];
        }
      }
    }
  }
  return result;
}

std::vector<double> finite_difference_gradient(const std::function<double(std::span<const double>)>& f,
                                               std::span<const double> x, double h) {
  std::vector<double> probe(x.begin(), x.end());
  std::vector<double> grad(x.size(), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

namespace ops {

namespace {

const Tensor& val(const Tape& t, Var v) { return t.value(v); }

}  // namespace

Var add(Tape& t, Var a, Var b) {
  Tensor out = core::add(val(t, a), val(t, b));
  return t.record(std::move(out), {a, b}, [](const Tape&, const Tensor& g, std::span<Tensor> in) {
    in[0] = g;
    in[1] = g;
  });
}

Var sub(Tape& t, Var a, Var b) {
  Tensor out = core::sub(val(t, a), val(t, b));
  return t.record(std::move(out), {a, b}, [](const Tape&, const Tensor& g, std::span<Tensor> in) {
    in[0] = g;
    in[1] = scaled(g, -1.0);
  });
}

Var mul(Tape& t, Var a, Var b) {
  Tensor out = hadamard(val(t, a), val(t, b));
  return t.record(std::move(out), {a, b}, [a, b](const Tape& tp, const Tensor& g, std::span<Tensor> in) {
    in[0] = hadamard(g, tp.value(b));
    in[1] = hadamard(g, tp.value(a));
  });
}

Var scale(Tape& t, Var a, double factor) {
  Tensor out = scaled(val(t, a), factor);
  return t.record(std::move(out), {a}, [factor](const Tape&, const Tensor& g, std::span<Tensor> in) {
    in[0] = scaled(g, factor);
  });
}

Var matmul(Tape& t, Var a, Var b) {
  Tensor out = core::matmul(val(t, a), val(t, b));
  return t.record(std::move(out), {a, b}, [a, b](const Tape& tp, const Tensor& g, std::span<Tensor> in) {
    if (tp.requires_grad(a)) {
      in[0] = core::matmul(g, core::transpose(tp.value(b)));
    }
    if (tp.requires_grad(b)) {
      in[1] = core::matmul(core::transpose(tp.value(a)), g);
    }
  });
}

Var transpose(Tape& t, Var a) {
  Tensor out = core::transpose(val(t, a));
  return t.record(std::move(out), {a}, [](const Tape&, const Tensor& g, std::span<Tensor> in) {
    in[0] = core::transpose(g);
  });
}

Var reshape(Tape& t, Var a, Shape shape) {
  const Tensor& x = val(t, a);
  require(shape_size(shape) == x.size(), ErrorCode::ShapeMismatch, "reshape: element count differs");
  Shape from = x.shape();
  return t.record(x.reshaped(std::move(shape)), {a}, [from = std::move(from)](const Tape&, const Tensor& g, std::span<Tensor> in) {
    in[0] = g.reshaped(from);
  });
}

Var add_row_bias(Tape& t, Var a, Var bias) {
  const Tensor& x = val(t, a);
  const Tensor& b = val(t, bias);
  require_rank(x, 2, "add_row_bias");
  require(b.rank() == 1 && b.size() == x.cols(), ErrorCode::ShapeMismatch, "add_row_bias: bias length");
  Tensor out = x;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) {
      row[c] += b[c];
    }
  }
  return t.record(std::move(out), {a, bias}, [](const Tape&, const Tensor& g, std::span<Tensor> in) {
    in[0] = g;
    for (std::size_t r = 0; r < g.rows(); ++r) {
      auto row = g.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) {
        in[1][c] += row[c];
      }
    }
  });
}

Var gather_rows(Tape& t, Var table, std::vector<std::size_t> ids) {
  const Tensor& tab = val(t, table);
  require_rank(tab, 2, "gather_rows");
  Tensor out(Shape{ids.size(), tab.cols()});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] < tab.rows(), ErrorCode::ShapeMismatch, "gather_rows: id out of range");
    std::copy(tab.row(ids[i]).begin(), tab.row(ids[i]).end(), out.row(i).begin());
  }
  return t.record(std::move(out), {table}, [ids = std::move(ids)](const Tape&, const Tensor& g, std::span<Tensor> in) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      auto dst = in[0].row(ids[i]);
      auto src = g.row(i);
      for (std::size_t c = 0; c < src.size(); ++c) {
        dst[c] += src[c];
      }
    }
  });
}

Var row(Tape& t, Var a, std::size_t r) {
  const Tensor& x = val(t, a);
  require_rank(x, 2, "row");
  require(r < x.rows(), ErrorCode::ShapeMismatch, "row index out of range");
  auto src = x.row(r);
  Tensor out = Tensor::vector(std::vector<double>(src.begin(), src.end()));
  return t.record(std::move(out), {a}, [r](const Tape&, const Tensor& g, std::span<Tensor> in) {
    auto dst = in[0].row(r);
    std::copy(g.values().begin(), g.values().end(), dst.begin());
  });
}

Var dot(Tape& t, Var a, Var b) {
  require_same_shape(val(t, a), val(t, b), "dot");
  Tensor out = Tensor::scalar(core::dot(val(t, a).values(), val(t, b).values()));
  return t.record(std::move(out), {a, b}, [a, b](const Tape& tp, const Tensor& g, std::span<Tensor> in) {
    in[0] = scaled(tp.value(b), g.item());
    in[1] = scaled(tp.value(a), g.item());
  });
}

Var sum(Tape& t, Var a) {
  double s = 0.0;
  for (double x : val(t, a).values()) {
    s += x;
  }
  return t.record(Tensor::scalar(s), {a}, [](const Tape&, const Tensor& g, std::span<Tensor> in) {
    std::fill(in[0].values().begin(), in[0].values().end(), g.item());
  });
}

Var sum_squares(Tape& t, Var a) {
  double s = 0.0;
  for (double x : val(t, a).values()) {
    s += x * x;
  }
  return t.record(Tensor::scalar(s), {a}, [a](const Tape& tp, const Tensor& g, std::span<Tensor> in) {
    in[0] = scaled(tp.value(a), 2.0 * g.item());
  });
}

Var relu(Tape& t, Var a) {
  Tensor out = val(t, a);
  for (double& x : out.values()) {
    x = x > 0.0 ? x : 0.0;
  }
  return t.record(std::move(out), {a}, [a](const Tape& tp, const Tensor& g, std::span<Tensor> in) {
    const Tensor& x = tp.value(a);
    for (std::size_t i = 0; i < x.size(); ++i) {
      in[0][i] = x[i] > 0.0 ? g[i] : 0.0;
    }
  });
}

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Var gelu(Tape& t, Var a) {
  Tensor out = val(t, a);
  for (double& x : out.values()) {
    const double u = kGeluC * (x + kGeluA * x * x * x);
    x = 0.5 * x * (1.0 + std::tanh(u));
  }
  return t.record(std::move(out), {a}, [a](const Tape& tp, const Tensor& g, std::span<Tensor> in) {
    const Tensor& x = tp.value(a);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double xi = x[i];
      const double u = kGeluC * (xi + kGeluA * xi * xi * xi);
      const double th = std::tanh(u);
      const double du = kGeluC * (1.0 + 3.0 * kGeluA * xi * xi);
      const double d = 0.5 * (1.0 + th) + 0.5 * xi * (1.0 - th * th) * du;
      in[0][i] = g[i] * d;
    }
  });
}

Var softmax_rows(Tape& t, Var a) {
  const Tensor& x = val(t, a);
  const Tensor m = x.rank() == 1 ? x.reshaped(Shape{1, x.size()}) : x;
  require_rank(m, 2, "softmax_rows");
  Tensor out(m.shape());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto src = m.row(r);
    auto dst = out.row(r);
    const double mx = *std::max_element(src.begin(), src.end());
    double z = 0.0;
    for (std::size_t c = 0; c < src.size(); ++c) {
      dst[c] = std::exp(src[c] - mx);
      z += dst[c];
    }
    for (double& v : dst) {
      v /= z;
    }
  }
  out = out.reshaped(x.shape());
  Tensor probs = out;
  return t.record(std::move(out), {a}, [probs = std::move(probs)](const Tape&, const Tensor& g, std::span<Tensor> in) {
    const std::size_t cols = probs.rank() == 1 ? probs.size() : probs.shape()[1];
    const std::size_t rows = probs.size() / cols;
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        s += g[r * cols + c] * probs[r * cols + c];
      }
      for (std::size_t c = 0; c < cols; ++c) {
        in[0][r * cols + c] = probs[r * cols + c] * (g[r * cols + c] - s);
      }
    }
  });
}

Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps, std::optional<double> frozen_scale) {
  const Tensor& in = val(t, x);
  const Tensor& gam = val(t, gain);
  const Tensor& bet = val(t, bias);
  require_rank(in, 2, "layer_norm");
  const std::size_t rows = in.rows();
  const std::size_t d = in.cols();
  require(gam.size() == d && bet.size() == d, ErrorCode::ShapeMismatch, "layer_norm: gain/bias length");
  if (frozen_scale) {
    require(*frozen_scale > 0.0, ErrorCode::InvalidConfig, "frozen layer-norm scale must be positive");
  }

  Tensor normed(in.shape());
  std::vector<double> inv_sigma(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    auto src = in.row(r);
    double mean = 0.0;
    for (double v : src) {
      mean += v;
    }
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : src) {
      var += (v - mean) * (v - mean);
    }
    var /= static_cast<double>(d);
    const double sigma = frozen_scale ? *frozen_scale : std::sqrt(var + eps);
    inv_sigma[r] = 1.0 / sigma;
    auto dst = normed.row(r);
    for (std::size_t c = 0; c < d; ++c) {
      dst[c] = (src[c] - mean) * inv_sigma[r];
    }
  }
  Tensor out(in.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      out(r, c) = normed(r, c) * gam[c] + bet[c];
    }
  }
  const bool frozen = frozen_scale.has_value();
  return t.record(std::move(out), {x, gain, bias},
                  [gain, frozen, normed = std::move(normed), inv_sigma = std::move(inv_sigma)](
                      const Tape& tp, const Tensor& g, std::span<Tensor> grads) {
                    const Tensor& gam = tp.value(gain);
                    const std::size_t rows = normed.rows();
                    const std::size_t d = normed.cols();
                    std::vector<double> dn(d);
                    for (std::size_t r = 0; r < rows; ++r) {
                      double mean_dn = 0.0;
                      double mean_dn_n = 0.0;
                      for (std::size_t c = 0; c < d; ++c) {
                        dn[c] = g(r, c) * gam[c];
                        mean_dn += dn[c];
                        mean_dn_n += dn[c] * normed(r, c);
                        grads[1][c] += g(r, c) * normed(r, c);
                        grads[2][c] += g(r, c);
                      }
                      mean_dn /= static_cast<double>(d);
                      mean_dn_n /= static_cast<double>(d);
                      for (std::size_t c = 0; c < d; ++c) {
                        double v = dn[c] - mean_dn;
                        if (!frozen) {
                          v -= normed(r, c) * mean_dn_n;
                        }
                        grads[0](r, c) = v * inv_sigma[r];
                      }
                    }
                  });
}

Var causal_attention(Tape& t, Var q, Var k, Var v, std::size_t n_heads) {
  const Tensor& Q = val(t, q);
  const Tensor& K = val(t, k);
  const Tensor& V = val(t, v);
  require_rank(Q, 2, "causal_attention q");
  require_same_shape(Q, K, "causal_attention q/k");
  require_same_shape(Q, V, "causal_attention q/v");
  const std::size_t T = Q.rows();
  const std::size_t d = Q.cols();
  require(n_heads > 0 && d % n_heads == 0, ErrorCode::InvalidConfig, "causal_attention: d not divisible by heads");
  const std::size_t dh = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  // probs[h] is a T x T lower-triangular row-stochastic matrix.
  std::vector<Tensor> probs(n_heads, Tensor(Shape{T, T}));
  Tensor out(Shape{T, d});
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * dh;
    Tensor& P = probs[h];
    for (std::size_t i = 0; i < T; ++i) {
      double mx = -1e300;
      for (std::size_t j = 0; j <= i; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) {
          s += Q(i, off + c) * K(j, off + c);
        }
        P(i, j) = s * inv_sqrt;
        mx = std::max(mx, P(i, j));
      }
      double z = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        P(i, j) = std::exp(P(i, j) - mx);
        z += P(i, j);
      }
      for (std::size_t j = 0; j <= i; ++j) {
        P(i, j) /= z;
        const double p = P(i, j);
        for (std::size_t c = 0; c < dh; ++c) {
          out(i, off + c) += p * V(j, off + c);
        }
      }
    }
  }
  return t.record(std::move(out), {q, k, v},
                  [q, k, v, n_heads, inv_sqrt, probs = std::move(probs)](const Tape& tp, const Tensor& g,
                                                                          std::span<Tensor> grads) {
                    const Tensor& Q = tp.value(q);
                    const Tensor& K = tp.value(k);
                    const Tensor& V = tp.value(v);
                    const std::size_t T = Q.rows();
                    const std::size_t dh = Q.cols() / n_heads;
                    std::vector<double> dp(T);
                    for (std::size_t h = 0; h < n_heads; ++h) {
                      const std::size_t off = h * dh;
                      const Tensor& P = probs[h];
                      for (std::size_t i = 0; i < T; ++i) {
                        double s = 0.0;
                        for (std::size_t j = 0; j <= i; ++j) {
                          double acc = 0.0;
                          for (std::size_t c = 0; c < dh; ++c) {
                            acc += g(i, off + c) * V(j, off + c);
                            grads[2](j, off + c) += P(i, j) * g(i, off + c);
                          }
                          dp[j] = acc;
                          s += acc * P(i, j);
                        }
                        for (std::size_t j = 0; j <= i; ++j) {
                          const double ds = P(i, j) * (dp[j] - s) * inv_sqrt;
                          for (std::size_t c = 0; c < dh; ++c) {
                            grads[0](i, off + c) += ds * K(j, off + c);
                            grads[1](j, off + c) += ds * Q(i, off + c);
                          }
                        }
                      }
                    }
                  });
}

Var cross_entropy(Tape& t, Var logits, std::vector<std::size_t> targets) {
  const Tensor& L = val(t, logits);
  require_rank(L, 2, "cross_entropy");
  require(targets.size() == L.rows() && !targets.empty(), ErrorCode::ShapeMismatch, "cross_entropy: targets");
  const std::size_t V = L.cols();
  Tensor probs(L.shape());
  double loss = 0.0;
  for (std::size_t r = 0; r < L.rows(); ++r) {
    require(targets[r] < V, ErrorCode::ShapeMismatch, "cross_entropy: target out of range");
    auto src = L.row(r);
    const double mx = *std::max_element(src.begin(), src.end());
    double z = 0.0;
    for (std::size_t c = 0; c < V; ++c) {
      probs(r, c) = std::exp(src[c] - mx);
      z += probs(r, c);
    }
    for (std::size_t c = 0; c < V; ++c) {
      probs(r, c) /= z;
    }
    loss += (mx + std::log(z)) - src[targets[r]];
  }
  const double n = static_cast<double>(L.rows());
  return t.record(Tensor::scalar(loss / n), {logits},
                  [probs = std::move(probs), targets = std::move(targets), n](const Tape&, const Tensor& g,
                                                                               std::span<Tensor> in) {
                    const double s = g.item() / n;
                    for (std::size_t r = 0; r < probs.rows(); ++r) {
                      for (std::size_t c = 0; c < probs.cols(); ++c) {
                        in[0](r, c) = s * (probs(r, c) - (c == targets[r] ? 1.0 : 0.0));
                      }
                    }
                  });
}

Var column_norms(Tape& t, Var a) {
  const Tensor& m = val(t, a);
  require_rank(m, 2, "column_norms");
  Tensor out(Shape{m.cols()});
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) {
      out[c] += m(r, c) * m(r, c);
    }
  }
  for (double& x : out.values()) {
    x = std::sqrt(x);
  }
  Tensor norms = out;
  return t.record(std::move(out), {a}, [a, norms = std::move(norms)](const Tape& tp, const Tensor& g,
                                                                      std::span<Tensor> in) {
    const Tensor& m = tp.value(a);
    for (std::size_t r = 0; r < m.rows(); ++r) {
      for (std::size_t c = 0; c < m.cols(); ++c) {
        in[0](r, c) = norms[c] > 0.0 ? g[c] * m(r, c) / norms[c] : 0.0;
      }
    }
  });
}

Var topk_rows(Tape& t, Var a, std::size_t k) {
  const Tensor& x = val(t, a);
  require_rank(x, 2, "topk_rows");
  const std::size_t cols = x.cols();
  Tensor mask(x.shape());
  std::vector<std::size_t> idx(cols);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      idx[c] = c;
    }
    const std::size_t keep = std::min(k, cols);
    auto row = x.row(r);
    // Ties broken by lower index so the selection is deterministic.
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep), idx.end(),
                      [&](std::size_t i, std::size_t j) { return row[i] > row[j] || (row[i] == row[j] && i < j); });
    for (std::size_t i = 0; i < keep; ++i) {
      mask(r, idx[i]) = 1.0;
    }
  }
  Tensor out = hadamard(x, mask);
  return t.record(std::move(out), {a}, [mask = std::move(mask)](const Tape&, const Tensor& g, std::span<Tensor> in) {
    in[0] = hadamard(g, mask);
  });
}

}  // namespace ops

}  // namespace polyprobe::core
