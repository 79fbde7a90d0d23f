#include "xmusic/tape.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

namespace xmusic {

namespace numeric {

// C += A * B, blocked over the inner dimension for vectorization.
static void matmul_acc_nn(const Tensor2& a, const Tensor2& b, Tensor2& out) {
  const int m = a.rows, k = a.cols, n = b.cols;
  for (int i = 0; i < m; ++i) {
    const double* arow = a.row(i);
    double* orow = out.row(i);
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b.row(p);
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

// C += A * B^T
static void matmul_acc_nt(const Tensor2& a, const Tensor2& b, Tensor2& out) {
  const int m = a.rows, k = a.cols, n = b.rows;
  for (int i = 0; i < m; ++i) {
    const double* arow = a.row(i);
    double* orow = out.row(i);
    for (int j = 0; j < n; ++j) {
      const double* brow = b.row(j);
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      orow[j] += acc;
    }
  }
}

// C += A^T * B
static void matmul_acc_tn(const Tensor2& a, const Tensor2& b, Tensor2& out) {
  const int m = a.cols, k = a.rows, n = b.cols;
  for (int p = 0; p < k; ++p) {
    const double* arow = a.row(p);
    const double* brow = b.row(p);
    for (int i = 0; i < m; ++i) {
      const double av = arow[i];
      double* orow = out.row(i);
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

void matmul(const Tensor2& a, const Tensor2& b, Tensor2& out) {
  out = Tensor2::zeros(a.rows, b.cols);
  matmul_acc_nn(a, b, out);
}

void stable_softmax(const double* logits, int n, double* out) {
  double mx = logits[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, logits[i]);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (int i = 0; i < n; ++i) out[i] /= sum;
}

double l2_norm(const double* v, int n) {
  double acc = 0.0;
  for (int i = 0; i < n; ++i) acc += v[i] * v[i];
  return std::sqrt(acc);
}

double dot(const double* a, const double* b, int n) {
  double acc = 0.0;
  for (int i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace numeric

// --- tape plumbing ----------------------------------------------------------

Var Tape::push(Tensor2 value, bool needs_grad, std::function<void(Tape&)> backprop) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::input(Tensor2 value) { return push(std::move(value), false, {}); }

Var Tape::param(Parameter& p) {
  Var v = push(p.value, true, {});
  node(v.idx).bound = &p;
  return v;
}

Tensor2& Tape::grad_buffer(int i) {
  Node& n = node(i);
  if (!n.grad_ready) {
    n.grad = Tensor2::zeros(n.value.rows, n.value.cols);
    n.grad_ready = true;
  }
  return n.grad;
}

const Tensor2& Tape::grad(Var v) const {
  const Node& n = node(v.idx);
  if (!ran_backward_) throw std::logic_error("Tape::grad: backward has not run");
  if (!n.grad_ready) {
    throw std::logic_error("Tape::grad: node has no gradient (not on the loss path)");
  }
  return n.grad;
}

void Tape::backward(Var loss) {
  if (nodes_.empty() || loss.tape != this || loss.idx < 0 ||
      loss.idx >= static_cast<int>(nodes_.size())) {
    throw std::logic_error("Tape::backward: no forward result to differentiate");
  }
  if (ran_backward_) throw std::logic_error("Tape::backward: already ran on this tape");
  const Node& top = node(loss.idx);
  if (top.value.rows != 1 || top.value.cols != 1) {
    throw std::invalid_argument("Tape::backward: loss must be 1x1, got " +
                                top.value.shape_str());
  }
  ran_backward_ = true;
  if (!top.needs_grad) return;  // loss does not depend on any parameter
  grad_buffer(loss.idx).data[0] = 1.0;
  for (int i = loss.idx; i >= 0; --i) {
    Node& n = node(i);
    if (!n.needs_grad || !n.grad_ready) continue;
    if (n.backprop) n.backprop(*this);
  }
  for (auto& n : nodes_) {
    if (n.bound != nullptr && n.grad_ready) {
      check_same_shape(n.bound->grad, n.grad, "Tape::backward parameter grad");
      for (std::size_t j = 0; j < n.grad.size(); ++j) {
        n.bound->grad.data[j] += n.grad.data[j];
      }
    }
  }
}

// --- helpers ----------------------------------------------------------------

namespace {

void require_same_tape(Var a, Var b, const char* op) {
  if (a.tape == nullptr || a.tape != b.tape) {
    throw std::logic_error(std::string(op) + ": vars come from different tapes");
  }
}

}  // namespace

// --- ops --------------------------------------------------------------------

Var matmul(Var a, Var b) {
  require_same_tape(a, b, "matmul");
  Tape& t = *a.tape;
  const Tensor2& av = t.value(a);
  const Tensor2& bv = t.value(b);
  if (av.cols != bv.rows) {
    throw std::invalid_argument("matmul: inner dimensions differ, " + av.shape_str() +
                                " * " + bv.shape_str());
  }
  Tensor2 out;
  numeric::matmul(av, bv, out);
  const bool ng = t.node(a.idx).needs_grad || t.node(b.idx).needs_grad;
  const int ai = a.idx, bi = b.idx;
  Var c = t.push(std::move(out), ng, {});
  const int ci = c.idx;
  t.node(ci).backprop = [ai, bi, ci](Tape& tp) {
    const Tensor2& dc = tp.node(ci).grad;
    if (tp.node(ai).needs_grad) {
      numeric::matmul_acc_nt(dc, tp.node(bi).value, tp.grad_buffer(ai));
    }
    if (tp.node(bi).needs_grad) {
      numeric::matmul_acc_tn(tp.node(ai).value, dc, tp.grad_buffer(bi));
    }
  };
  return c;
}

Var transpose(Var x) {
  Tape& t = *x.tape;
  const Tensor2& xv = t.value(x);
  Tensor2 out(xv.cols, xv.rows);
  for (int r = 0; r < xv.rows; ++r) {
    for (int c = 0; c < xv.cols; ++c) out.at(c, r) = xv.at(r, c);
  }
  const int xi = x.idx;
  Var y = t.push(std::move(out), t.node(xi).needs_grad, {});
  const int yi = y.idx;
  t.node(yi).backprop = [xi, yi](Tape& tp) {
    if (!tp.node(xi).needs_grad) return;
    const Tensor2& dy = tp.node(yi).grad;
    Tensor2& dx = tp.grad_buffer(xi);
    for (int r = 0; r < dy.rows; ++r) {
      for (int c = 0; c < dy.cols; ++c) dx.at(c, r) += dy.at(r, c);
    }
  };
  return y;
}

Var add(Var a, Var b) {
  require_same_tape(a, b, "add");
  Tape& t = *a.tape;
  const Tensor2& av = t.value(a);
  const Tensor2& bv = t.value(b);
  check_same_shape(av, bv, "add");
  Tensor2 out(av.rows, av.cols);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = av.data[i] + bv.data[i];
  const bool ng = t.node(a.idx).needs_grad || t.node(b.idx).needs_grad;
  Var c = t.push(std::move(out), ng, {});
  const int ai = a.idx, bi = b.idx, ci = c.idx;
  t.node(ci).backprop = [ai, bi, ci](Tape& tp) {
    const Tensor2& dc = tp.node(ci).grad;
    if (tp.node(ai).needs_grad) {
      Tensor2& da = tp.grad_buffer(ai);
      for (std::size_t i = 0; i < dc.size(); ++i) da.data[i] += dc.data[i];
    }
    if (tp.node(bi).needs_grad) {
      Tensor2& db = tp.grad_buffer(bi);
      for (std::size_t i = 0; i < dc.size(); ++i) db.data[i] += dc.data[i];
    }
  };
  return c;
}

Var sub(Var a, Var b) {
  require_same_tape(a, b, "sub");
  Tape& t = *a.tape;
  const Tensor2& av = t.value(a);
  const Tensor2& bv = t.value(b);
  check_same_shape(av, bv, "sub");
  Tensor2 out(av.rows, av.cols);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = av.data[i] - bv.data[i];
  const bool ng = t.node(a.idx).needs_grad || t.node(b.idx).needs_grad;
  Var c = t.push(std::move(out), ng, {});
  const int ai = a.idx, bi = b.idx, ci = c.idx;
  t.node(ci).backprop = [ai, bi, ci](Tape& tp) {
    const Tensor2& dc = tp.node(ci).grad;
    if (tp.node(ai).needs_grad) {
      Tensor2& da = tp.grad_buffer(ai);
      for (std::size_t i = 0; i < dc.size(); ++i) da.data[i] += dc.data[i];
    }
    if (tp.node(bi).needs_grad) {
      Tensor2& db = tp.grad_buffer(bi);
      for (std::size_t i = 0; i < dc.size(); ++i) db.data[i] -= dc.data[i];
    }
  };
  return c;
}

Var mul(Var a, Var b) {
  require_same_tape(a, b, "mul");
  Tape& t = *a.tape;
  const Tensor2& av = t.value(a);
  const Tensor2& bv = t.value(b);
  check_same_shape(av, bv, "mul");
  Tensor2 out(av.rows, av.cols);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = av.data[i] * bv.data[i];
  const bool ng = t.node(a.idx).needs_grad || t.node(b.idx).needs_grad;
  Var c = t.push(std::move(out), ng, {});
  const int ai = a.idx, bi = b.idx, ci = c.idx;
  t.node(ci).backprop = [ai, bi, ci](Tape& tp) {
    const Tensor2& dc = tp.node(ci).grad;
    if (tp.node(ai).needs_grad) {
      Tensor2& da = tp.grad_buffer(ai);
      const Tensor2& bvv = tp.node(bi).value;
      for (std::size_t i = 0; i < dc.size(); ++i) da.data[i] += dc.data[i] * bvv.data[i];
    }
    if (tp.node(bi).needs_grad) {
      Tensor2& db = tp.grad_buffer(bi);
      const Tensor2& avv = tp.node(ai).value;
      for (std::size_t i = 0; i < dc.size(); ++i) db.data[i] += dc.data[i] * avv.data[i];
    }
  };
  return c;
}

Var add_row_broadcast(Var x, Var bias) {
  require_same_tape(x, bias, "add_row_broadcast");
  Tape& t = *x.tape;
  const Tensor2& xv = t.value(x);
  const Tensor2& bv = t.value(bias);
  if (bv.rows != 1 || bv.cols != xv.cols) {
    throw std::invalid_argument("add_row_broadcast: bias must be 1x" +
                                std::to_string(xv.cols) + ", got " + bv.shape_str());
  }
  Tensor2 out(xv.rows, xv.cols);
  for (int r = 0; r < xv.rows; ++r) {
    const double* xr = xv.row(r);
    double* orow = out.row(r);
    for (int c = 0; c < xv.cols; ++c) orow[c] = xr[c] + bv.data[c];
  }
  const bool ng = t.node(x.idx).needs_grad || t.node(bias.idx).needs_grad;
  Var y = t.push(std::move(out), ng, {});
  const int xi = x.idx, bi = bias.idx, yi = y.idx;
  t.node(yi).backprop = [xi, bi, yi](Tape& tp) {
    const Tensor2& dy = tp.node(yi).grad;
    if (tp.node(xi).needs_grad) {
      Tensor2& dx = tp.grad_buffer(xi);
      for (std::size_t i = 0; i < dy.size(); ++i) dx.data[i] += dy.data[i];
    }
    if (tp.node(bi).needs_grad) {
      Tensor2& db = tp.grad_buffer(bi);
      for (int r = 0; r < dy.rows; ++r) {
        const double* dr = dy.row(r);
        for (int c = 0; c < dy.cols; ++c) db.data[c] += dr[c];
      }
    }
  };
  return y;
}

Var scale(Var x, double s) {
  Tape& t = *x.tape;
  const Tensor2& xv = t.value(x);
  Tensor2 out(xv.rows, xv.cols);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = xv.data[i] * s;
  Var y = t.push(std::move(out), t.node(x.idx).needs_grad, {});
  const int xi = x.idx, yi = y.idx;
  t.node(yi).backprop = [xi, yi, s](Tape& tp) {
    if (!tp.node(xi).needs_grad) return;
    const Tensor2& dy = tp.node(yi).grad;
    Tensor2& dx = tp.grad_buffer(xi);
    for (std::size_t i = 0; i < dy.size(); ++i) dx.data[i] += dy.data[i] * s;
  };
  return y;
}

Var add_scalar(Var x, double s) {
  Tape& t = *x.tape;
  const Tensor2& xv = t.value(x);
  Tensor2 out(xv.rows, xv.cols);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = xv.data[i] + s;
  Var y = t.push(std::move(out), t.node(x.idx).needs_grad, {});
  const int xi = x.idx, yi = y.idx;
  t.node(yi).backprop = [xi, yi](Tape& tp) {
    if (!tp.node(xi).needs_grad) return;
    const Tensor2& dy = tp.node(yi).grad;
    Tensor2& dx = tp.grad_buffer(xi);
    for (std::size_t i = 0; i < dy.size(); ++i) dx.data[i] += dy.data[i];
  };
  return y;
}

namespace {

// Wires a unary op whose local derivative depends only on the input value.
template <typename FwdFn, typename DerivFn>
Var unary_op(Var x, FwdFn&& fwd, DerivFn&& deriv) {
  Tape& t = *x.tape;
  const Tensor2& xv = t.value(x);
  Tensor2 out(xv.rows, xv.cols);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = fwd(xv.data[i]);
  Var y = t.push(std::move(out), t.node(x.idx).needs_grad, {});
  const int xi = x.idx, yi = y.idx;
  t.node(yi).backprop = [xi, yi, deriv](Tape& tp) {
    if (!tp.node(xi).needs_grad) return;
    const Tensor2& dy = tp.node(yi).grad;
    const Tensor2& xvv = tp.node(xi).value;
    Tensor2& dx = tp.grad_buffer(xi);
    for (std::size_t i = 0; i < dy.size(); ++i) {
      dx.data[i] += dy.data[i] * deriv(xvv.data[i]);
    }
  };
  return y;
}

}  // namespace

Var relu(Var x) {
  return unary_op(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Var gelu(Var x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return unary_op(
      x, [=](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [=](double v) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) +
               v * inv_sqrt2pi * std::exp(-0.5 * v * v);
      });
}

Var sigmoid(Var x) {
  return unary_op(
      x,
      [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                     : std::exp(v) / (1.0 + std::exp(v)); },
      [](double v) {
        const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                  : std::exp(v) / (1.0 + std::exp(v));
        return s * (1.0 - s);
      });
}

Var log_elem(Var x) {
  return unary_op(
      x, [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; });
}

Var clamp(Var x, double lo, double hi) {
  if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
  return unary_op(
      x, [=](double v) { return std::min(std::max(v, lo), hi); },
      [=](double v) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Var layer_norm_rows(Var x, Var gain, Var bias) {
  require_same_tape(x, gain, "layer_norm_rows");
  require_same_tape(x, bias, "layer_norm_rows");
  constexpr double eps = 1e-5;
  Tape& t = *x.tape;
  const Tensor2& xv = t.value(x);
  const Tensor2& gv = t.value(gain);
  const Tensor2& bv = t.value(bias);
  if (gv.rows != 1 || gv.cols != xv.cols || bv.rows != 1 || bv.cols != xv.cols) {
    throw std::invalid_argument("layer_norm_rows: gain/bias must be 1x" +
                                std::to_string(xv.cols));
  }
  const int n = xv.cols;
  Tensor2 out(xv.rows, n);
  Tensor2 xhat(xv.rows, n);
  std::vector<double> inv_std(static_cast<std::size_t>(xv.rows));
  for (int r = 0; r < xv.rows; ++r) {
    const double* xr = xv.row(r);
    double mean = 0.0;
    for (int c = 0; c < n; ++c) mean += xr[c];
    mean /= n;
    double var = 0.0;
    for (int c = 0; c < n; ++c) {
      const double d = xr[c] - mean;
      var += d * d;
    }
    var /= n;
    const double istd = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = istd;
    double* hr = xhat.row(r);
    double* orow = out.row(r);
    for (int c = 0; c < n; ++c) {
      hr[c] = (xr[c] - mean) * istd;
      orow[c] = hr[c] * gv.data[c] + bv.data[c];
    }
  }
  const bool ng = t.node(x.idx).needs_grad || t.node(gain.idx).needs_grad ||
                  t.node(bias.idx).needs_grad;
  Var y = t.push(std::move(out), ng, {});
  const int xi = x.idx, gi = gain.idx, bi = bias.idx, yi = y.idx;
  auto saved_xhat = std::make_shared<Tensor2>(std::move(xhat));
  auto saved_istd = std::make_shared<std::vector<double>>(std::move(inv_std));
  t.node(yi).backprop = [xi, gi, bi, yi, saved_xhat, saved_istd](Tape& tp) {
    const Tensor2& dy = tp.node(yi).grad;
    const Tensor2& gvv = tp.node(gi).value;
    const Tensor2& h = *saved_xhat;
    const int n2 = dy.cols;
    if (tp.node(gi).needs_grad) {
      Tensor2& dg = tp.grad_buffer(gi);
      for (int r = 0; r < dy.rows; ++r) {
        const double* dr = dy.row(r);
        const double* hr = h.row(r);
        for (int c = 0; c < n2; ++c) dg.data[c] += dr[c] * hr[c];
      }
    }
    if (tp.node(bi).needs_grad) {
      Tensor2& db = tp.grad_buffer(bi);
      for (int r = 0; r < dy.rows; ++r) {
        const double* dr = dy.row(r);
        for (int c = 0; c < n2; ++c) db.data[c] += dr[c];
      }
    }
    if (tp.node(xi).needs_grad) {
      Tensor2& dx = tp.grad_buffer(xi);
      for (int r = 0; r < dy.rows; ++r) {
        const double* dr = dy.row(r);
        const double* hr = h.row(r);
        const double istd = (*saved_istd)[static_cast<std::size_t>(r)];
        double mean_dh = 0.0, mean_dh_h = 0.0;
        for (int c = 0; c < n2; ++c) {
          const double dh = dr[c] * gvv.data[c];
          mean_dh += dh;
          mean_dh_h += dh * hr[c];
        }
        mean_dh /= n2;
        mean_dh_h /= n2;
        double* dxr = dx.row(r);
        for (int c = 0; c < n2; ++c) {
          const double dh = dr[c] * gvv.data[c];
          dxr[c] += istd * (dh - mean_dh - hr[c] * mean_dh_h);
        }
      }
    }
  };
  return y;
}

Var softmax_rows(Var x) {
  Tape& t = *x.tape;
  const Tensor2& xv = t.value(x);
  if (xv.cols < 1) throw std::invalid_argument("softmax_rows: empty rows");
  Tensor2 out(xv.rows, xv.cols);
  for (int r = 0; r < xv.rows; ++r) {
    numeric::stable_softmax(xv.row(r), xv.cols, out.row(r));
  }
  Var y = t.push(std::move(out), t.node(x.idx).needs_grad, {});
  const int xi = x.idx, yi = y.idx;
  t.node(yi).backprop = [xi, yi](Tape& tp) {
    if (!tp.node(xi).needs_grad) return;
    const Tensor2& dy = tp.node(yi).grad;
    const Tensor2& p = tp.node(yi).value;
    Tensor2& dx = tp.grad_buffer(xi);
    for (int r = 0; r < dy.rows; ++r) {
      const double* dr = dy.row(r);
      const double* pr = p.row(r);
      double inner = 0.0;
      for (int c = 0; c < dy.cols; ++c) inner += dr[c] * pr[c];
      double* dxr = dx.row(r);
      for (int c = 0; c < dy.cols; ++c) dxr[c] += pr[c] * (dr[c] - inner);
    }
  };
  return y;
}

Var log_softmax_rows(Var x) {
  Tape& t = *x.tape;
  const Tensor2& xv = t.value(x);
  if (xv.cols < 1) throw std::invalid_argument("log_softmax_rows: empty rows");
  Tensor2 out(xv.rows, xv.cols);
  for (int r = 0; r < xv.rows; ++r) {
    const double* xr = xv.row(r);
    double mx = xr[0];
    for (int c = 1; c < xv.cols; ++c) mx = std::max(mx, xr[c]);
    double sum = 0.0;
    for (int c = 0; c < xv.cols; ++c) sum += std::exp(xr[c] - mx);
    const double lse = mx + std::log(sum);
    double* orow = out.row(r);
    for (int c = 0; c < xv.cols; ++c) orow[c] = xr[c] - lse;
  }
  Var y = t.push(std::move(out), t.node(x.idx).needs_grad, {});
  const int xi = x.idx, yi = y.idx;
  t.node(yi).backprop = [xi, yi](Tape& tp) {
    if (!tp.node(xi).needs_grad) return;
    const Tensor2& dy = tp.node(yi).grad;
    const Tensor2& lsm = tp.node(yi).value;
    Tensor2& dx = tp.grad_buffer(xi);
    for (int r = 0; r < dy.rows; ++r) {
      const double* dr = dy.row(r);
      const double* lr = lsm.row(r);
      double dsum = 0.0;
      for (int c = 0; c < dy.cols; ++c) dsum += dr[c];
      double* dxr = dx.row(r);
      for (int c = 0; c < dy.cols; ++c) {
        dxr[c] += dr[c] - std::exp(lr[c]) * dsum;
      }
    }
  };
  return y;
}

Var l2_normalize_rows(Var x) {
  Tape& t = *x.tape;
  const Tensor2& xv = t.value(x);
  Tensor2 out(xv.rows, xv.cols);
  std::vector<double> norms(static_cast<std::size_t>(xv.rows));
  for (int r = 0; r < xv.rows; ++r) {
    const double nrm = numeric::l2_norm(xv.row(r), xv.cols);
    if (nrm <= 1e-12) {
      throw std::invalid_argument("l2_normalize: degenerate vector, norm " +
                                  std::to_string(nrm) + " at row " + std::to_string(r));
    }
    norms[static_cast<std::size_t>(r)] = nrm;
    const double* xr = xv.row(r);
    double* orow = out.row(r);
    for (int c = 0; c < xv.cols; ++c) orow[c] = xr[c] / nrm;
  }
  Var y = t.push(std::move(out), t.node(x.idx).needs_grad, {});
  const int xi = x.idx, yi = y.idx;
  auto saved_norms = std::make_shared<std::vector<double>>(std::move(norms));
  t.node(yi).backprop = [xi, yi, saved_norms](Tape& tp) {
    if (!tp.node(xi).needs_grad) return;
    const Tensor2& dy = tp.node(yi).grad;
    const Tensor2& yv = tp.node(yi).value;
    Tensor2& dx = tp.grad_buffer(xi);
    for (int r = 0; r < dy.rows; ++r) {
      const double* dr = dy.row(r);
      const double* yr = yv.row(r);
      const double nrm = (*saved_norms)[static_cast<std::size_t>(r)];
      const double inner = numeric::dot(dr, yr, dy.cols);
      double* dxr = dx.row(r);
      for (int c = 0; c < dy.cols; ++c) {
        dxr[c] += (dr[c] - yr[c] * inner) / nrm;
      }
    }
  };
  return y;
}

Var mean_all(Var x) {
  Tape& t = *x.tape;
  const Tensor2& xv = t.value(x);
  if (xv.size() == 0) throw std::invalid_argument("mean_all: empty tensor");
  double acc = 0.0;
  for (double v : xv.data) acc += v;
  Tensor2 out(1, 1);
  out.data[0] = acc / static_cast<double>(xv.size());
  Var y = t.push(std::move(out), t.node(x.idx).needs_grad, {});
  const int xi = x.idx, yi = y.idx;
  t.node(yi).backprop = [xi, yi](Tape& tp) {
    if (!tp.node(xi).needs_grad) return;
    const double g = tp.node(yi).grad.data[0];
    Tensor2& dx = tp.grad_buffer(xi);
    const double scale_by = g / static_cast<double>(dx.size());
    for (double& v : dx.data) v += scale_by;
  };
  return y;
}

Var row_sum(Var x) {
  Tape& t = *x.tape;
  const Tensor2& xv = t.value(x);
  Tensor2 out(xv.rows, 1);
  for (int r = 0; r < xv.rows; ++r) {
    const double* xr = xv.row(r);
    double acc = 0.0;
    for (int c = 0; c < xv.cols; ++c) acc += xr[c];
    out.data[static_cast<std::size_t>(r)] = acc;
  }
  Var y = t.push(std::move(out), t.node(x.idx).needs_grad, {});
  const int xi = x.idx, yi = y.idx;
  t.node(yi).backprop = [xi, yi](Tape& tp) {
    if (!tp.node(xi).needs_grad) return;
    const Tensor2& dy = tp.node(yi).grad;
    Tensor2& dx = tp.grad_buffer(xi);
    for (int r = 0; r < dx.rows; ++r) {
      const double g = dy.data[static_cast<std::size_t>(r)];
      double* dxr = dx.row(r);
      for (int c = 0; c < dx.cols; ++c) dxr[c] += g;
    }
  };
  return y;
}

Var mean_rows(Var x) {
  Tape& t = *x.tape;
  const Tensor2& xv = t.value(x);
  if (xv.rows < 1) throw std::invalid_argument("mean_rows: no rows");
  Tensor2 out(1, xv.cols);
  for (int r = 0; r < xv.rows; ++r) {
    const double* xr = xv.row(r);
    for (int c = 0; c < xv.cols; ++c) out.data[c] += xr[c];
  }
  for (int c = 0; c < xv.cols; ++c) out.data[c] /= xv.rows;
  Var y = t.push(std::move(out), t.node(x.idx).needs_grad, {});
  const int xi = x.idx, yi = y.idx;
  t.node(yi).backprop = [xi, yi](Tape& tp) {
    if (!tp.node(xi).needs_grad) return;
    const Tensor2& dy = tp.node(yi).grad;
    Tensor2& dx = tp.grad_buffer(xi);
    for (int r = 0; r < dx.rows; ++r) {
      double* dxr = dx.row(r);
      for (int c = 0; c < dx.cols; ++c) dxr[c] += dy.data[c] / dx.rows;
    }
  };
  return y;
}

Var gather_rows(Var x, std::vector<int> indices) {
  Tape& t = *x.tape;
  const Tensor2& xv = t.value(x);
  for (int i : indices) {
    if (i < 0 || i >= xv.rows) {
      throw std::invalid_argument("gather_rows: index " + std::to_string(i) +
                                  " out of range for " + xv.shape_str());
    }
  }
  Tensor2 out(static_cast<int>(indices.size()), xv.cols);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const double* src = xv.row(indices[r]);
    double* dst = out.row(static_cast<int>(r));
    std::copy(src, src + xv.cols, dst);
  }
  Var y = t.push(std::move(out), t.node(x.idx).needs_grad, {});
  const int xi = x.idx, yi = y.idx;
  auto idx = std::make_shared<std::vector<int>>(std::move(indices));
  t.node(yi).backprop = [xi, yi, idx](Tape& tp) {
    if (!tp.node(xi).needs_grad) return;
    const Tensor2& dy = tp.node(yi).grad;
    Tensor2& dx = tp.grad_buffer(xi);
    for (std::size_t r = 0; r < idx->size(); ++r) {
      const double* dr = dy.row(static_cast<int>(r));
      double* dxr = dx.row((*idx)[r]);
      for (int c = 0; c < dy.cols; ++c) dxr[c] += dr[c];
    }
  };
  return y;
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  Tape& t = *parts[0].tape;
  int total_rows = 0;
  const int cols = t.value(parts[0]).cols;
  bool ng = false;
  for (const Var& p : parts) {
    require_same_tape(parts[0], p, "concat_rows");
    const Tensor2& pv = t.value(p);
    if (pv.cols != cols) {
      throw std::invalid_argument("concat_rows: column mismatch");
    }
    total_rows += pv.rows;
    ng = ng || t.node(p.idx).needs_grad;
  }
  Tensor2 out(total_rows, cols);
  int at = 0;
  std::vector<std::pair<int, int>> spans;  // (node idx, row offset)
  spans.reserve(parts.size());
  for (const Var& p : parts) {
    const Tensor2& pv = t.value(p);
    std::copy(pv.data.begin(), pv.data.end(), out.row(at));
    spans.emplace_back(p.idx, at);
    at += pv.rows;
  }
  Var y = t.push(std::move(out), ng, {});
  const int yi = y.idx;
  auto saved = std::make_shared<std::vector<std::pair<int, int>>>(std::move(spans));
  t.node(yi).backprop = [yi, saved](Tape& tp) {
    const Tensor2& dy = tp.node(yi).grad;
    for (const auto& [pi, offset] : *saved) {
      if (!tp.node(pi).needs_grad) continue;
      Tensor2& dp = tp.grad_buffer(pi);
      for (int r = 0; r < dp.rows; ++r) {
        const double* dr = dy.row(offset + r);
        double* dpr = dp.row(r);
        for (int c = 0; c < dy.cols; ++c) dpr[c] += dr[c];
      }
    }
  };
  return y;
}

Var slice_rows(Var x, int begin, int end) {
  Tape& t = *x.tape;
  const Tensor2& xv = t.value(x);
  if (begin < 0 || end > xv.rows || begin >= end) {
    throw std::invalid_argument("slice_rows: invalid range [" + std::to_string(begin) +
                                ", " + std::to_string(end) + ") for " + xv.shape_str());
  }
  Tensor2 out(end - begin, xv.cols);
  std::copy(xv.row(begin), xv.row(begin) + out.size(), out.data.begin());
  Var y = t.push(std::move(out), t.node(x.idx).needs_grad, {});
  const int xi = x.idx, yi = y.idx;
  t.node(yi).backprop = [xi, yi, begin](Tape& tp) {
    if (!tp.node(xi).needs_grad) return;
    const Tensor2& dy = tp.node(yi).grad;
    Tensor2& dx = tp.grad_buffer(xi);
    for (int r = 0; r < dy.rows; ++r) {
      const double* dr = dy.row(r);
      double* dxr = dx.row(begin + r);
      for (int c = 0; c < dy.cols; ++c) dxr[c] += dr[c];
    }
  };
  return y;
}

Var diag(Var x) {
  Tape& t = *x.tape;
  const Tensor2& xv = t.value(x);
  if (xv.rows != xv.cols) {
    throw std::invalid_argument("diag: tensor is not square, " + xv.shape_str());
  }
  Tensor2 out(xv.rows, 1);
  for (int i = 0; i < xv.rows; ++i) out.data[static_cast<std::size_t>(i)] = xv.at(i, i);
  Var y = t.push(std::move(out), t.node(x.idx).needs_grad, {});
  const int xi = x.idx, yi = y.idx;
  t.node(yi).backprop = [xi, yi](Tape& tp) {
    if (!tp.node(xi).needs_grad) return;
    const Tensor2& dy = tp.node(yi).grad;
    Tensor2& dx = tp.grad_buffer(xi);
    for (int i = 0; i < dy.rows; ++i) dx.at(i, i) += dy.data[static_cast<std::size_t>(i)];
  };
  return y;
}

Var div_by_scalar(Var x, Var scalar) {
  require_same_tape(x, scalar, "div_by_scalar");
  Tape& t = *x.tape;
  const Tensor2& xv = t.value(x);
  const Tensor2& sv = t.value(scalar);
  if (sv.rows != 1 || sv.cols != 1) {
    throw std::invalid_argument("div_by_scalar: scalar must be 1x1, got " +
                                sv.shape_str());
  }
  const double s = sv.data[0];
  if (s == 0.0) throw std::invalid_argument("div_by_scalar: division by zero");
  Tensor2 out(xv.rows, xv.cols);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = xv.data[i] / s;
  const bool ng = t.node(x.idx).needs_grad || t.node(scalar.idx).needs_grad;
  Var y = t.push(std::move(out), ng, {});
  const int xi = x.idx, si = scalar.idx, yi = y.idx;
  t.node(yi).backprop = [xi, si, yi, s](Tape& tp) {
    const Tensor2& dy = tp.node(yi).grad;
    if (tp.node(xi).needs_grad) {
      Tensor2& dx = tp.grad_buffer(xi);
      for (std::size_t i = 0; i < dy.size(); ++i) dx.data[i] += dy.data[i] / s;
    }
    if (tp.node(si).needs_grad) {
      const Tensor2& xvv = tp.node(xi).value;
      double acc = 0.0;
      for (std::size_t i = 0; i < dy.size(); ++i) acc += dy.data[i] * xvv.data[i];
      tp.grad_buffer(si).data[0] += -acc / (s * s);
    }
  };
  return y;
}

Var segmented_attention(Var qkv, std::vector<int> seq_lengths, int n_heads) {
  Tape& t = *qkv.tape;
  const Tensor2& in = t.value(qkv);
  if (in.cols % 3 != 0) {
    throw std::invalid_argument("segmented_attention: qkv columns must be 3*width");
  }
  const int width = in.cols / 3;
  if (n_heads < 1 || width % n_heads != 0) {
    throw std::invalid_argument("segmented_attention: heads must divide width");
  }
  int total = 0;
  for (int len : seq_lengths) {
    if (len < 1) throw std::invalid_argument("segmented_attention: empty segment");
    total += len;
  }
  if (total != in.rows) {
    throw std::invalid_argument("segmented_attention: segment lengths do not cover rows");
  }
  const int head_dim = width / n_heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  Tensor2 out(in.rows, width);
  // Attention weights saved per segment: (n_heads * len) x len.
  auto attn = std::make_shared<std::vector<Tensor2>>();
  attn->reserve(seq_lengths.size());

  int offset = 0;
  for (int len : seq_lengths) {
    Tensor2 weights(n_heads * len, len);
    for (int h = 0; h < n_heads; ++h) {
      const int col0 = h * head_dim;
      // scores and softmax per query row
      for (int qi = 0; qi < len; ++qi) {
        const double* qrow = in.row(offset + qi) + col0;
        std::vector<double> scores(static_cast<std::size_t>(len));
        for (int ki = 0; ki < len; ++ki) {
          const double* krow = in.row(offset + ki) + width + col0;
          scores[static_cast<std::size_t>(ki)] =
              numeric::dot(qrow, krow, head_dim) * inv_scale;
        }
        double* wrow = weights.row(h * len + qi);
        numeric::stable_softmax(scores.data(), len, wrow);
        double* orow = out.row(offset + qi) + col0;
        for (int ki = 0; ki < len; ++ki) {
          const double* vrow = in.row(offset + ki) + 2 * width + col0;
          const double w = wrow[ki];
          for (int c = 0; c < head_dim; ++c) orow[c] += w * vrow[c];
        }
      }
    }
    attn->push_back(std::move(weights));
    offset += len;
  }

  Var y = t.push(std::move(out), t.node(qkv.idx).needs_grad, {});
  const int xi = qkv.idx, yi = y.idx;
  auto lens = std::make_shared<std::vector<int>>(std::move(seq_lengths));
  t.node(yi).backprop = [xi, yi, lens, attn, n_heads, width, head_dim,
                         inv_scale](Tape& tp) {
    if (!tp.node(xi).needs_grad) return;
    const Tensor2& dy = tp.node(yi).grad;
    const Tensor2& in2 = tp.node(xi).value;
    Tensor2& dx = tp.grad_buffer(xi);
    int off = 0;
    for (std::size_t s = 0; s < lens->size(); ++s) {
      const int len = (*lens)[s];
      const Tensor2& weights = (*attn)[s];
      for (int h = 0; h < n_heads; ++h) {
        const int col0 = h * head_dim;
        for (int qi = 0; qi < len; ++qi) {
          const double* dout = dy.row(off + qi) + col0;
          const double* wrow = weights.row(h * len + qi);
          // dV and dA
          std::vector<double> da(static_cast<std::size_t>(len));
          for (int ki = 0; ki < len; ++ki) {
            const double* vrow = in2.row(off + ki) + 2 * width + col0;
            da[static_cast<std::size_t>(ki)] = numeric::dot(dout, vrow, head_dim);
            double* dvrow = dx.row(off + ki) + 2 * width + col0;
            const double w = wrow[ki];
            for (int c = 0; c < head_dim; ++c) dvrow[c] += w * dout[c];
          }
          // softmax backward: ds = w .* (da - sum(da .* w))
          double inner = 0.0;
          for (int ki = 0; ki < len; ++ki) inner += da[static_cast<std::size_t>(ki)] * wrow[ki];
          const double* qrow = in2.row(off + qi) + col0;
          double* dqrow = dx.row(off + qi) + col0;
          for (int ki = 0; ki < len; ++ki) {
            const double ds = wrow[ki] * (da[static_cast<std::size_t>(ki)] - inner) * inv_scale;
            const double* krow = in2.row(off + ki) + width + col0;
            double* dkrow = dx.row(off + ki) + width + col0;
            for (int c = 0; c < head_dim; ++c) {
              dqrow[c] += ds * krow[c];
              dkrow[c] += ds * qrow[c];
            }
          }
        }
      }
      off += len;
    }
  };
  return y;
}

}  // namespace xmusic
