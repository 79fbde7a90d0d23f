#pragma once

#include <functional>
#include <span>
#include <vector>

#include "xmusic/tensor.hpp"

namespace xmusic {

class Tape;

// Handle to a node on a tape. Cheap to copy; valid as long as the tape lives.
struct Var {
  Tape* tape = nullptr;
  int idx = -1;
};

// Reverse-mode tape over Tensor2 values. Nodes are appended in forward order,
// which is also a valid topological order, so backward() is a single reverse
// sweep. Gradients of nodes bound to a Parameter are accumulated into the
// parameter's grad at the end of backward().
class Tape {
 public:
  Var input(Tensor2 value);            // constant leaf, no gradient tracked
  Var param(Parameter& p);             // differentiable leaf bound to p

  void backward(Var loss);             // loss must be 1x1; callable once per tape
  bool backward_ran() const { return ran_backward_; }

  const Tensor2& value(Var v) const { return node(v.idx).value; }
  const Tensor2& grad(Var v) const;

  std::size_t node_count() const { return nodes_.size(); }

  // Node-level API used by op implementations.
  struct Node {
    Tensor2 value;
    Tensor2 grad;                      // allocated lazily during backward
    bool needs_grad = false;
    bool grad_ready = false;
    Parameter* bound = nullptr;
    std::function<void(Tape&)> backprop;  // empty for leaves
  };

  Node& node(int i) { return nodes_[static_cast<std::size_t>(i)]; }
  const Node& node(int i) const { return nodes_[static_cast<std::size_t>(i)]; }

  Var push(Tensor2 value, bool needs_grad, std::function<void(Tape&)> backprop);
  Tensor2& grad_buffer(int i);         // zero-allocates on first touch

 private:
  std::vector<Node> nodes_;
  bool ran_backward_ = false;
};

// --- ops -------------------------------------------------------------------

Var matmul(Var a, Var b);
Var transpose(Var x);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var add_row_broadcast(Var x, Var bias);      // bias is 1 x cols
Var scale(Var x, double s);
Var add_scalar(Var x, double s);
Var relu(Var x);
Var gelu(Var x);                             // exact erf form
Var sigmoid(Var x);
Var log_elem(Var x);
Var clamp(Var x, double lo, double hi);
Var layer_norm_rows(Var x, Var gain, Var bias);  // eps 1e-5
Var softmax_rows(Var x);                     // max-subtracted
Var log_softmax_rows(Var x);
Var l2_normalize_rows(Var x);                // throws on near-zero row norm
Var mean_all(Var x);                         // -> 1x1
Var row_sum(Var x);                          // -> rows x 1
Var mean_rows(Var x);                        // column means -> 1 x cols
Var gather_rows(Var x, std::vector<int> indices);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var x, int begin, int end);   // rows [begin, end)
Var diag(Var x);                             // square -> n x 1
Var div_by_scalar(Var x, Var scalar);        // scalar is a 1x1 var (e.g. temperature)

// Multi-head scaled dot-product self-attention over a batch of packed
// sequences. qkv is (sum of seq_lengths) x 3w with columns [Q | K | V];
// attention is computed independently per sequence and per head.
Var segmented_attention(Var qkv, std::vector<int> seq_lengths, int n_heads);

// Plain non-autograd kernels shared with the forward passes.
namespace numeric {
void matmul(const Tensor2& a, const Tensor2& b, Tensor2& out);
void stable_softmax(const double* logits, int n, double* out);
double l2_norm(const double* v, int n);
double dot(const double* a, const double* b, int n);
}  // namespace numeric

}  // namespace xmusic
