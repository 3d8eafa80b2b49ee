#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cemb/tensor.hpp"

namespace cemb {

class Graph;

// Op-specific attributes stored on a node.
struct NodeAux {
  double scalar = 0.0;
  std::size_t a = 0;
  std::size_t b = 0;
  std::vector<std::size_t> index;
};

// Handle to a node on a Graph. Cheap to copy; only valid while the graph lives.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const std::vector<double>& grad() const;
  double item() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

enum class Op : std::uint8_t {
  Leaf,
  MatMul,
  Transpose,
  Add,
  Sub,
  Mul,
  Scale,
  Relu,
  Exp,
  Log,
  Square,
  Softplus,
  Sum,
  Mean,
  Softmax,
  RmsNorm,
  L2Normalize,
  MaxOverRows,
  RowMax,
  ConcatRows,
  ConcatCols,
  SliceRows,
  SliceCols,
  GatherRows,
  GatherElements,
  Stack,
};

const char* op_name(Op op);

// Append-only tape. Node i only references parents with index < i, so the
// insertion order is a topological order. Values are computed eagerly when a
// node is appended; backward walks the tape in reverse.
//
// A Graph is single-threaded. Independent graphs may run concurrently as
// long as bound parameter tensors are not written to by more than one.
class Graph {
 public:
  using Aux = NodeAux;

  struct Node {
    Op op = Op::Leaf;
    std::vector<std::size_t> parents;
    Aux aux;
    Tensor value;
    std::vector<double> grad;       // this backward pass
    std::vector<double> leaf_grad;  // accumulated across passes (leaves only)
    Tensor* bound = nullptr;        // parameter tensor receiving leaf gradients
    bool requires_grad = false;
    bool needs_grad = false;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var leaf(Tensor value, bool requires_grad = false);
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  // Leaf bound to an external parameter. backward() accumulates into
  // t.grad(). Repeated calls with the same tensor return the same node.
  Var param(Tensor& t);

  Var push(Op op, std::vector<std::size_t> parents, Aux aux = {});

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  // Accumulated gradient for leaves, last-pass gradient otherwise. Empty when
  // the node does not depend on any requires_grad leaf.
  const std::vector<double>& grad(Var v) const;
  const Node& node(std::size_t id) const { return nodes_[id]; }
  std::size_t size() const { return nodes_.size(); }

  // Reverse-mode sweep from a scalar root.
  void backward(Var root);

  // Recompute every non-leaf node from its parents and compare bitwise.
  bool replay_matches() const;

  // Hash of every discrete branch taken so far (relu signs, argmax choices).
  std::uint64_t branch_signature() const { return signature_; }

  // When enabled (default), any op producing NaN/Inf throws NumericError.
  void set_check_finite(bool on) { check_finite_ = on; }

 private:
  void evaluate(Node& n, std::uint64_t* signature) const;
  void propagate(std::size_t id);

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> bound_;
  std::uint64_t signature_ = 0x9e3779b97f4a7c15ULL;
  bool check_finite_ = true;
};

// ---- operations ----------------------------------------------------------

Var matmul(Var a, Var b);
Var transpose(Var a);
// Elementwise; one operand may be a single-element tensor (scalar broadcast).
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
// Subgradient at 0 is 0.
Var relu(Var a);
Var exp(Var a);
// Throws DomainError on non-positive input.
Var log(Var a);
Var square(Var a);
// log(1 + exp(x)), evaluated stably.
Var softplus(Var a);
Var sum(Var a);
Var mean(Var a);

// Row-wise softmax of a square score matrix with the strictly upper
// triangle masked out.
Var softmax_causal(Var scores);
// Row i may attend to columns j <= i + offset. Rows of a new block appended
// after `offset` cached positions use this form.
Var softmax_causal(Var scores, std::size_t offset);

Var rms_norm(Var x, Var gain, double eps = 1e-6);
// Unit-normalizes each row. With eps == 0 a row norm <= 1e-12 throws
// DegenerateInputError; eps > 0 regularizes as sqrt(|x|^2 + eps).
Var l2_normalize(Var x, double eps = 0.0);

struct MaxResult {
  Var value;
  std::size_t index = 0;
};
// Max over a vector; ties go to the lowest index and the gradient is routed
// to that entry only.
MaxResult max_over_rows(Var s);

struct RowMaxResult {
  Var values;  // shape [rows]
  std::vector<std::size_t> argmax;
};
// max_over_rows applied to every row of a matrix.
RowMaxResult row_max(Var x);

Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(Var x, std::size_t begin, std::size_t end);
Var slice_cols(Var x, std::size_t begin, std::size_t end);
Var gather_rows(Var table, std::span<const std::size_t> rows);
// Picks flat (row-major) elements into a rank 1 tensor.
Var gather_elements(Var x, std::span<const std::size_t> flat_index);
// Assembles single-element nodes into a rows x cols matrix.
Var stack(std::span<const Var> scalars, std::size_t rows, std::size_t cols);

// ---- finite-difference checking -----------------------------------------

struct NamedParam {
  std::string name;
  Tensor* tensor = nullptr;
};

using ScalarFn = std::function<Var(Graph&, std::span<const Var>)>;

struct GradcheckOptions {
  double h = 1e-5;
  double tol = 1e-5;
  // Number of randomly sampled coordinates; 0 checks every coordinate.
  std::size_t samples = 0;
  std::uint64_t seed = 0;
  double small_value = 1e-6;
  double abs_tol = 1e-8;
};

struct GradcheckEntry {
  std::string param;
  std::size_t index = 0;
  double numeric = 0.0;
  double analytic = 0.0;
  double rel_error = 0.0;
  bool kink_skipped = false;
  bool pass = true;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double max_rel_error = 0.0;
  std::size_t kink_skipped = 0;
  bool pass = true;
};

// Central differences against reverse mode. Coordinates whose +h/-h
// evaluations take different discrete branches are reported as
// kink_skipped rather than failures.
GradcheckReport gradcheck(const ScalarFn& f, std::span<const NamedParam> params,
                          const GradcheckOptions& options = {});

}  // namespace cemb
