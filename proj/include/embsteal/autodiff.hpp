#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "embsteal/errors.hpp"
#include "embsteal/rng.hpp"
#include "embsteal/tensor.hpp"

namespace embsteal {

// A trainable tensor together with its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {}

  void zero_grad() {
    if (grad.shape() != value.shape()) {
      grad = Tensor(value.shape());
    } else {
      grad.fill(0.0);
    }
  }
};

inline void add_into(Tensor& dst, const Tensor& src) {
  if (dst.size() != src.size()) throw ShapeError("gradient accumulation shape mismatch");
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

class Tape;

// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
};

// Records a computation graph as it is evaluated, then replays it backwards.
// One tape per forward/backward pass; a tape is not shared across threads.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Var constant(Tensor value) { return push_node(std::move(value), {}, nullptr, false, nullptr); }

  // Read-only view of a tensor owned elsewhere; it must outlive the tape.
  Var frozen(const Tensor& value) {
    Var v = push_node(Tensor(), {}, nullptr, false, nullptr);
    nodes_[v.id].ref = &value;
    return v;
  }

  // Trainable leaf. Refers to p.value without copying; gradients are added
  // to p.grad by backward().
  Var param(Parameter& p) {
    Var v = push_node(Tensor(), {}, nullptr, true, &p);
    nodes_[v.id].ref = &p.value;
    return v;
  }

  // Adds an op node. `backward` reads grad(self) and accumulates into the
  // parents' gradients; it only runs if some parent needs a gradient.
  Var push(Tensor value, std::vector<std::size_t> parents, Backward backward, const char* op) {
    require_finite(value, op);
    bool needs = false;
    for (std::size_t p : parents) needs = needs || nodes_[p].needs_grad;
    return push_node(std::move(value), std::move(parents), std::move(backward), needs, nullptr);
  }

  // A node with no tape parents whose backward writes gradients somewhere
  // else directly (embedding gathers scatter into the table's gradient).
  Var push_sink(Tensor value, Backward backward, const char* op) {
    require_finite(value, op);
    return push_node(std::move(value), {}, std::move(backward), true, nullptr);
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.ref ? *n.ref : n.value;
  }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  Tensor& grad(std::size_t id) {
    Node& n = nodes_[id];
    const Tensor& v = n.ref ? *n.ref : n.value;
    if (n.grad.shape() != v.shape()) n.grad = Tensor(v.shape());
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  // Reverse sweep from a scalar. Parameter gradients are added to
  // Parameter::grad (call zero_grad between steps).
  void backward(Var loss) {
    if (loss.tape != this) throw Error("backward on a variable from another tape");
    if (value(loss.id).size() != 1) throw ShapeError("backward requires a scalar loss");
    grad(loss.id)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.param) {
        if (n.param->grad.shape() != n.param->value.shape()) n.param->grad = Tensor(n.param->value.shape());
        add_into(n.param->grad, n.grad);
      } else if (n.backward) {
        n.backward(*this, i);
      }
    }
  }

 private:
  struct Node {
    Tensor value;
    const Tensor* ref = nullptr;
    Tensor grad;
    std::vector<std::size_t> parents;
    Backward backward;
    bool needs_grad = false;
    Parameter* param = nullptr;
  };

  Var push_node(Tensor value, std::vector<std::size_t> parents, Backward backward, bool needs, Parameter* p) {
    nodes_.push_back(Node{std::move(value), nullptr, Tensor(), std::move(parents), std::move(backward), needs, p});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

namespace ad {

inline void same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw Error("variables live on different tapes");
}

inline Var matmul(Var a, Var b) {
  same_tape(a, b);
  return a.tape->push(embsteal::matmul(a.value(), b.value()), {a.id, b.id},
                      [a, b](Tape& t, std::size_t self) {
                        const Tensor& g = t.grad(self);
                        if (t.needs_grad(a.id)) add_into(t.grad(a.id), embsteal::matmul_bt(g, t.value(b.id)));
                        if (t.needs_grad(b.id)) {
                          add_into(t.grad(b.id), embsteal::matmul(embsteal::transpose(t.value(a.id)), g));
                        }
                      },
                      "matmul");
}

// a × bᵀ
inline Var matmul_bt(Var a, Var b) {
  same_tape(a, b);
  return a.tape->push(embsteal::matmul_bt(a.value(), b.value()), {a.id, b.id},
                      [a, b](Tape& t, std::size_t self) {
                        const Tensor& g = t.grad(self);
                        if (t.needs_grad(a.id)) add_into(t.grad(a.id), embsteal::matmul(g, t.value(b.id)));
                        if (t.needs_grad(b.id)) {
                          add_into(t.grad(b.id), embsteal::matmul(embsteal::transpose(g), t.value(a.id)));
                        }
                      },
                      "matmul_bt");
}

inline Var add(Var a, Var b) {
  same_tape(a, b);
  if (a.value().shape() != b.value().shape()) {
    throw ShapeError("add of " + shape_str(a.value().shape()) + " and " + shape_str(b.value().shape()));
  }
  Tensor out = a.value();
  add_into(out, b.value());
  return a.tape->push(std::move(out), {a.id, b.id},
                      [a, b](Tape& t, std::size_t self) {
                        const Tensor& g = t.grad(self);
                        if (t.needs_grad(a.id)) add_into(t.grad(a.id), g);
                        if (t.needs_grad(b.id)) add_into(t.grad(b.id), g);
                      },
                      "add");
}

// x[m×n] + b[n] broadcast over rows.
inline Var add_row(Var x, Var b) {
  same_tape(x, b);
  const std::size_t n = x.value().cols();
  if (b.value().size() != n) throw ShapeError("add_row bias length differs from column count");
  Tensor out = x.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t j = 0; j < n; ++j) row[j] += b.value()[j];
  }
  return x.tape->push(std::move(out), {x.id, b.id},
                      [x, b](Tape& t, std::size_t self) {
                        const Tensor& g = t.grad(self);
                        if (t.needs_grad(x.id)) add_into(t.grad(x.id), g);
                        if (t.needs_grad(b.id)) {
                          Tensor& gb = t.grad(b.id);
                          for (std::size_t r = 0; r < g.rows(); ++r) {
                            auto row = g.row(r);
                            for (std::size_t j = 0; j < row.size(); ++j) gb[j] += row[j];
                          }
                        }
                      },
                      "add_row");
}

inline Var scale(Var a, double c) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= c;
  return a.tape->push(std::move(out), {a.id},
                      [a, c](Tape& t, std::size_t self) {
                        const Tensor& g = t.grad(self);
                        Tensor& ga = t.grad(a.id);
                        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
                      },
                      "scale");
}

// Elementwise product.
inline Var mul(Var a, Var b) {
  same_tape(a, b);
  if (a.value().shape() != b.value().shape()) throw ShapeError("mul shape mismatch");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape->push(std::move(out), {a.id, b.id},
                      [a, b](Tape& t, std::size_t self) {
                        const Tensor& g = t.grad(self);
                        if (t.needs_grad(a.id)) {
                          Tensor& ga = t.grad(a.id);
                          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * t.value(b.id)[i];
                        }
                        if (t.needs_grad(b.id)) {
                          Tensor& gb = t.grad(b.id);
                          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * t.value(a.id)[i];
                        }
                      },
                      "mul");
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape->push(Tensor({1}, {s}), {a.id},
                      [a](Tape& t, std::size_t self) {
                        const double g = t.grad(self)[0];
                        for (double& v : t.grad(a.id).data()) v += g;
                      },
                      "sum");
}

inline Var gelu(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = gelu_value(v);
  return a.tape->push(std::move(out), {a.id},
                      [a](Tape& t, std::size_t self) {
                        const Tensor& g = t.grad(self);
                        const Tensor& x = t.value(a.id);
                        Tensor& ga = t.grad(a.id);
                        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * gelu_derivative(x[i]);
                      },
                      "gelu");
}

inline Var softmax_rows(Var x) {
  return x.tape->push(embsteal::softmax_rows(x.value()), {x.id},
                      [x](Tape& t, std::size_t self) {
                        const Tensor& g = t.grad(self);
                        const Tensor& y = t.value(self);
                        Tensor& gx = t.grad(x.id);
                        for (std::size_t r = 0; r < y.rows(); ++r) {
                          auto yr = y.row(r);
                          auto gr = g.row(r);
                          auto out = gx.row(r);
                          double inner = 0.0;
                          for (std::size_t j = 0; j < yr.size(); ++j) inner += yr[j] * gr[j];
                          for (std::size_t j = 0; j < yr.size(); ++j) out[j] += yr[j] * (gr[j] - inner);
                        }
                      },
                      "softmax_rows");
}

inline Var layer_norm(Var x, Var gain, Var shift, double eps = kLayerNormEps) {
  same_tape(x, gain);
  same_tape(x, shift);
  return x.tape->push(
      embsteal::layer_norm(x.value(), gain.value(), shift.value(), eps), {x.id, gain.id, shift.id},
      [x, gain, shift, eps](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& in = t.value(x.id);
        const Tensor& gn = t.value(gain.id);
        const std::size_t d = in.cols();
        const double inv_d = 1.0 / static_cast<double>(d);
        std::vector<double> xhat(d), dxhat(d);
        for (std::size_t r = 0; r < in.rows(); ++r) {
          auto xr = in.row(r);
          auto gr = g.row(r);
          double mean = 0.0;
          for (double v : xr) mean += v;
          mean *= inv_d;
          double var = 0.0;
          for (double v : xr) var += (v - mean) * (v - mean);
          var *= inv_d;
          const double inv = 1.0 / std::sqrt(var + eps);
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            xhat[j] = (xr[j] - mean) * inv;
            dxhat[j] = gr[j] * gn[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xhat[j];
          }
          mean_dxhat *= inv_d;
          mean_dxhat_xhat *= inv_d;
          if (t.needs_grad(gain.id)) {
            Tensor& gg = t.grad(gain.id);
            for (std::size_t j = 0; j < d; ++j) gg[j] += gr[j] * xhat[j];
          }
          if (t.needs_grad(shift.id)) {
            Tensor& gs = t.grad(shift.id);
            for (std::size_t j = 0; j < d; ++j) gs[j] += gr[j];
          }
          if (t.needs_grad(x.id)) {
            auto gx = t.grad(x.id).row(r);
            for (std::size_t j = 0; j < d; ++j) {
              gx[j] += inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
            }
          }
        }
      },
      "layer_norm");
}

inline Var mean_pool(Var x, const std::vector<bool>& mask) {
  Tensor out = embsteal::mean_pool(x.value(), mask);
  std::size_t count = 0;
  for (bool m : mask) count += m ? 1 : 0;
  return x.tape->push(std::move(out), {x.id},
                      [x, mask, count](Tape& t, std::size_t self) {
                        const Tensor& g = t.grad(self);
                        Tensor& gx = t.grad(x.id);
                        const double w = 1.0 / static_cast<double>(count);
                        for (std::size_t r = 0; r < mask.size(); ++r) {
                          if (!mask[r]) continue;
                          auto row = gx.row(r);
                          for (std::size_t j = 0; j < row.size(); ++j) row[j] += w * g[j];
                        }
                      },
                      "mean_pool");
}

// Row-wise unit normalization.
inline Var l2_normalize(Var x) {
  return x.tape->push(embsteal::l2_normalize(x.value()), {x.id},
                      [x](Tape& t, std::size_t self) {
                        const Tensor& g = t.grad(self);
                        const Tensor& y = t.value(self);
                        const Tensor& in = t.value(x.id);
                        Tensor& gx = t.grad(x.id);
                        for (std::size_t r = 0; r < y.rows(); ++r) {
                          const double n = l2_norm(in.row(r));
                          const double yg = dot(y.row(r), g.row(r));
                          auto yr = y.row(r);
                          auto gr = g.row(r);
                          auto out = gx.row(r);
                          for (std::size_t j = 0; j < yr.size(); ++j) out[j] += (gr[j] - yr[j] * yg) / n;
                        }
                      },
                      "l2_normalize");
}

// Inverted dropout. Identity when p == 0.
inline Var dropout(Var x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout rate must be below 1");
  const double keep = 1.0 / (1.0 - p);
  std::vector<double> mask(x.value().size());
  for (double& m : mask) m = rng.bernoulli(p) ? 0.0 : keep;
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return x.tape->push(std::move(out), {x.id},
                      [x, mask = std::move(mask)](Tape& t, std::size_t self) {
                        const Tensor& g = t.grad(self);
                        Tensor& gx = t.grad(x.id);
                        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
                      },
                      "dropout");
}

inline Var slice_cols(Var x, std::size_t start, std::size_t count) {
  const Tensor& in = x.value();
  require_rank2(in, "slice_cols");
  if (start + count > in.cols() || count == 0) throw ShapeError("slice_cols out of range");
  Tensor out({in.rows(), count});
  for (std::size_t r = 0; r < in.rows(); ++r)
    for (std::size_t j = 0; j < count; ++j) out(r, j) = in(r, start + j);
  return x.tape->push(std::move(out), {x.id},
                      [x, start, count](Tape& t, std::size_t self) {
                        const Tensor& g = t.grad(self);
                        Tensor& gx = t.grad(x.id);
                        for (std::size_t r = 0; r < g.rows(); ++r)
                          for (std::size_t j = 0; j < count; ++j) gx(r, start + j) += g(r, j);
                      },
                      "slice_cols");
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  Tape* tape = parts.front().tape;
  const std::size_t rows = parts.front().value().rows();
  std::size_t total = 0;
  std::vector<std::size_t> ids;
  for (Var p : parts) {
    if (p.tape != tape) throw Error("variables live on different tapes");
    if (p.value().rows() != rows) throw ShapeError("concat_cols row mismatch");
    total += p.value().cols();
    ids.push_back(p.id);
  }
  Tensor out({rows, total});
  std::size_t offset = 0;
  for (Var p : parts) {
    const Tensor& v = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < v.cols(); ++j) out(r, offset + j) = v(r, j);
    offset += v.cols();
  }
  return tape->push(std::move(out), ids,
                    [ids](Tape& t, std::size_t self) {
                      const Tensor& g = t.grad(self);
                      std::size_t off = 0;
                      for (std::size_t id : ids) {
                        const std::size_t c = t.value(id).cols();
                        if (t.needs_grad(id)) {
                          Tensor& gp = t.grad(id);
                          for (std::size_t r = 0; r < g.rows(); ++r)
                            for (std::size_t j = 0; j < c; ++j) gp(r, j) += g(r, off + j);
                        }
                        off += c;
                      }
                    },
                    "concat_cols");
}

// Stacks equal-length vectors (or single-row matrices) into an n×d matrix.
inline Var stack_rows(const std::vector<Var>& rows) {
  if (rows.empty()) throw ShapeError("stack_rows of nothing");
  Tape* tape = rows.front().tape;
  const std::size_t d = rows.front().value().size();
  std::vector<std::size_t> ids;
  Tensor out({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Tensor& v = rows[i].value();
    if (rows[i].tape != tape) throw Error("variables live on different tapes");
    if (v.size() != d) throw ShapeError("stack_rows length mismatch");
    std::copy(v.data().begin(), v.data().end(), out.row(i).begin());
    ids.push_back(rows[i].id);
  }
  return tape->push(std::move(out), ids,
                    [ids](Tape& t, std::size_t self) {
                      const Tensor& g = t.grad(self);
                      for (std::size_t i = 0; i < ids.size(); ++i) {
                        if (!t.needs_grad(ids[i])) continue;
                        Tensor& gp = t.grad(ids[i]);
                        auto gr = g.row(i);
                        for (std::size_t j = 0; j < gr.size(); ++j) gp[j] += gr[j];
                      }
                    },
                    "stack_rows");
}

// Looks up rows of an embedding table. When `grad_target` is given the
// backward pass scatters straight into its gradient, so a large vocabulary
// never needs a dense gradient per step.
inline Var gather_rows(Tape& tape, const Tensor& table, std::span<const std::size_t> ids,
                       Parameter* grad_target = nullptr) {
  require_rank2(table, "gather_rows");
  const std::size_t d = table.cols();
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= table.rows()) throw ShapeError("gather_rows index " + std::to_string(ids[i]) + " out of range");
    auto src = table.row(ids[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  if (!grad_target) return tape.constant(std::move(out));
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  Parameter* p = grad_target;
  return tape.push_sink(std::move(out),
                        [p, idx = std::move(idx)](Tape& t, std::size_t self) {
                          if (p->grad.shape() != p->value.shape()) p->grad = Tensor(p->value.shape());
                          const Tensor& g = t.grad(self);
                          for (std::size_t i = 0; i < idx.size(); ++i) {
                            auto dst = p->grad.row(idx[i]);
                            auto src = g.row(i);
                            for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
                          }
                        },
                        "gather_rows");
}

inline Var gather_rows(Tape& tape, Parameter& table, std::span<const std::size_t> ids) {
  return gather_rows(tape, table.value, ids, &table);
}

}  // namespace ad
}  // namespace embsteal
