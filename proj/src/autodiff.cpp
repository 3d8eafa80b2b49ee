#include "cemb/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <random>

#include "cemb/error.hpp"
#include "cemb/kernels.hpp"

namespace cemb {

namespace {

std::uint64_t mix(std::uint64_t h, std::uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  h ^= h >> 31;
  h *= 0xbf58476d1ce4e5b9ULL;
  return h;
}

double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Graph& graph_of(Var a) {
  if (!a.graph) throw ContractError("variable is not attached to a graph");
  return *a.graph;
}

Graph& graph_of(Var a, Var b) {
  if (a.graph != b.graph) throw ContractError("operands live on different graphs");
  return graph_of(a);
}

std::vector<double> empty_grad;

void require_rank2(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw DimensionError(std::string(what) + " needs a matrix, got " + t.shape_string());
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::Relu: return "relu";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Square: return "square";
    case Op::Softplus: return "softplus";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::Softmax: return "softmax_causal";
    case Op::RmsNorm: return "rms_norm";
    case Op::L2Normalize: return "l2_normalize";
    case Op::MaxOverRows: return "max_over_rows";
    case Op::RowMax: return "row_max";
    case Op::ConcatRows: return "concat_rows";
    case Op::ConcatCols: return "concat_cols";
    case Op::SliceRows: return "slice_rows";
    case Op::SliceCols: return "slice_cols";
    case Op::GatherRows: return "gather_rows";
    case Op::GatherElements: return "gather_elements";
    case Op::Stack: return "stack";
  }
  return "?";
}

const Tensor& Var::value() const { return graph_of(*this).value(*this); }
const std::vector<double>& Var::grad() const { return graph_of(*this).grad(*this); }
double Var::item() const {
  const auto& v = value();
  if (v.size() != 1) throw ContractError("item() on non-scalar " + v.shape_string());
  return v[0];
}

// ---- Graph ---------------------------------------------------------------

Var Graph::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.op = Op::Leaf;
  n.value = std::move(value);
  n.value.zero_grad();
  n.value.requires_grad = false;
  n.requires_grad = requires_grad;
  n.needs_grad = requires_grad;
  if (check_finite_ && !n.value.all_finite()) throw NumericError("non-finite leaf value");
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Graph::param(Tensor& t) {
  if (auto it = bound_.find(&t); it != bound_.end()) return {this, it->second};
  Node n;
  n.op = Op::Leaf;
  n.value = Tensor(t.shape(), std::vector<double>(t.values().begin(), t.values().end()));
  n.requires_grad = true;
  n.needs_grad = true;
  n.bound = &t;
  nodes_.push_back(std::move(n));
  bound_.emplace(&t, nodes_.size() - 1);
  return {this, nodes_.size() - 1};
}

Var Graph::push(Op op, std::vector<std::size_t> parents, Aux aux) {
  Node n;
  n.op = op;
  n.parents = std::move(parents);
  n.aux = std::move(aux);
  for (auto p : n.parents) {
    if (p >= nodes_.size()) throw ContractError("parent index out of range");
    n.needs_grad = n.needs_grad || nodes_[p].needs_grad;
  }
  evaluate(n, &signature_);
  if (check_finite_ && !n.value.all_finite())
    throw NumericError(std::string(op_name(op)) + " produced a non-finite value");
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

const std::vector<double>& Graph::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.op == Op::Leaf) return n.leaf_grad.empty() ? empty_grad : n.leaf_grad;
  return n.grad.empty() ? empty_grad : n.grad;
}

void Graph::evaluate(Node& n, std::uint64_t* signature) const {
  auto P = [&](std::size_t i) -> const Tensor& { return nodes_[n.parents[i]].value; };
  switch (n.op) {
    case Op::Leaf:
      return;
    case Op::MatMul: {
      const Tensor& a = P(0);
      const Tensor& b = P(1);
      const std::size_t m = a.rows(), k = a.cols(), c = b.cols();
      if (b.rows() != k)
        throw DimensionError("matmul " + a.shape_string() + " x " + b.shape_string());
      n.value = Tensor::matrix(m, c);
      kernels::matmul_acc(a.values().data(), b.values().data(), n.value.values().data(), m, k, c);
      return;
    }
    case Op::Transpose: {
      const Tensor& a = P(0);
      const std::size_t r = a.rows(), c = a.cols();
      n.value = Tensor::matrix(c, r);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) n.value(j, i) = a(i, j);
      return;
    }
    case Op::Add:
    case Op::Sub:
    case Op::Mul: {
      const Tensor& a = P(0);
      const Tensor& b = P(1);
      const bool a_scalar = a.size() == 1 && b.size() != 1;
      const bool b_scalar = b.size() == 1 && a.size() != 1;
      if (!a_scalar && !b_scalar && !a.same_shape(b))
        throw DimensionError(std::string(op_name(n.op)) + " " + a.shape_string() + " vs " +
                             b.shape_string());
      n.value = Tensor(a_scalar ? b.shape() : a.shape());
      auto out = n.value.values();
      for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = a[a_scalar ? 0 : i];
        const double y = b[b_scalar ? 0 : i];
        out[i] = n.op == Op::Add ? x + y : n.op == Op::Sub ? x - y : x * y;
      }
      return;
    }
    case Op::Scale:
    case Op::Relu:
    case Op::Exp:
    case Op::Log:
    case Op::Square:
    case Op::Softplus: {
      const Tensor& a = P(0);
      n.value = Tensor(a.shape());
      auto out = n.value.values();
      auto in = a.values();
      std::uint64_t h = signature ? *signature : 0;
      for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = in[i];
        switch (n.op) {
          case Op::Scale: out[i] = n.aux.scalar * x; break;
          case Op::Relu:
            out[i] = x > 0.0 ? x : 0.0;
            h = mix(h, x > 0.0 ? 1 : 0);
            break;
          case Op::Exp: out[i] = std::exp(x); break;
          case Op::Log:
            if (!(x > 0.0)) throw DomainError("log of non-positive value " + std::to_string(x));
            out[i] = std::log(x);
            break;
          case Op::Square: out[i] = x * x; break;
          default: out[i] = stable_softplus(x); break;
        }
      }
      if (signature) *signature = h;
      return;
    }
    case Op::Sum:
    case Op::Mean: {
      const Tensor& a = P(0);
      double s = 0.0;
      for (double x : a.values()) s += x;
      if (n.op == Op::Mean) s /= static_cast<double>(a.size());
      n.value = Tensor::scalar(s);
      return;
    }
    case Op::Softmax: {
      const Tensor& a = P(0);
      require_rank2(a, "softmax_causal");
      const std::size_t r = a.rows(), c = a.cols();
      const std::size_t offset = n.aux.a;
      if (offset == 0 && r != c) throw DimensionError("softmax_causal needs a square matrix, got " + a.shape_string());
      if (offset + r > c) throw DimensionError("softmax_causal offset exceeds key count");
      n.value = Tensor::matrix(r, c);
      for (std::size_t i = 0; i < r; ++i) {
        const std::size_t visible = i + offset + 1;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < visible; ++j) mx = std::max(mx, a(i, j));
        double z = 0.0;
        for (std::size_t j = 0; j < visible; ++j) {
          const double e = std::exp(a(i, j) - mx);
          n.value(i, j) = e;
          z += e;
        }
        for (std::size_t j = 0; j < visible; ++j) n.value(i, j) /= z;
      }
      return;
    }
    case Op::RmsNorm: {
      const Tensor& x = P(0);
      const Tensor& g = P(1);
      const std::size_t r = x.rows(), d = x.cols();
      if (g.size() != d) throw DimensionError("rms_norm gain " + g.shape_string() + " vs row width " + std::to_string(d));
      n.value = Tensor(x.shape());
      for (std::size_t i = 0; i < r; ++i) {
        double ms = 0.0;
        for (std::size_t j = 0; j < d; ++j) ms += x(i, j) * x(i, j);
        ms /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(ms + n.aux.scalar);
        for (std::size_t j = 0; j < d; ++j) n.value.values()[i * d + j] = x.values()[i * d + j] * inv * g[j];
      }
      return;
    }
    case Op::L2Normalize: {
      const Tensor& x = P(0);
      const std::size_t r = x.rows(), d = x.cols();
      n.value = Tensor(x.shape());
      for (std::size_t i = 0; i < r; ++i) {
        double ss = 0.0;
        for (std::size_t j = 0; j < d; ++j) ss += x.values()[i * d + j] * x.values()[i * d + j];
        if (n.aux.scalar == 0.0 && std::sqrt(ss) <= 1e-12)
          throw DegenerateInputError("l2_normalize row " + std::to_string(i) + " has near-zero norm");
        const double norm = std::sqrt(ss + n.aux.scalar);
        for (std::size_t j = 0; j < d; ++j) n.value.values()[i * d + j] = x.values()[i * d + j] / norm;
      }
      return;
    }
    case Op::MaxOverRows:
    case Op::RowMax: {
      const Tensor& a = P(0);
      const std::size_t r = n.op == Op::MaxOverRows ? 1 : a.rows();
      const std::size_t c = n.op == Op::MaxOverRows ? a.size() : a.cols();
      if (a.size() == 0 || c == 0) throw DimensionError("max over empty input");
      n.value = Tensor({r});
      n.aux.index.assign(r, 0);
      std::uint64_t h = signature ? *signature : 0;
      for (std::size_t i = 0; i < r; ++i) {
        std::size_t best = 0;
        double bv = a.values()[i * c];
        for (std::size_t j = 1; j < c; ++j) {
          if (a.values()[i * c + j] > bv) {
            bv = a.values()[i * c + j];
            best = j;
          }
        }
        n.value[i] = bv;
        n.aux.index[i] = best;
        h = mix(h, best);
      }
      if (signature) *signature = h;
      return;
    }
    case Op::ConcatRows: {
      std::size_t rows = 0;
      const std::size_t c = P(0).cols();
      for (std::size_t i = 0; i < n.parents.size(); ++i) {
        if (P(i).cols() != c) throw DimensionError("concat_rows width mismatch");
        rows += P(i).rows();
      }
      n.value = Tensor::matrix(rows, c);
      auto out = n.value.values();
      std::size_t at = 0;
      for (std::size_t i = 0; i < n.parents.size(); ++i) {
        auto in = P(i).values();
        std::copy(in.begin(), in.end(), out.begin() + static_cast<std::ptrdiff_t>(at));
        at += in.size();
      }
      return;
    }
    case Op::ConcatCols: {
      const std::size_t r = P(0).rows();
      std::size_t cols = 0;
      for (std::size_t i = 0; i < n.parents.size(); ++i) {
        if (P(i).rows() != r) throw DimensionError("concat_cols height mismatch");
        cols += P(i).cols();
      }
      n.value = Tensor::matrix(r, cols);
      std::size_t at = 0;
      for (std::size_t i = 0; i < n.parents.size(); ++i) {
        const Tensor& p = P(i);
        for (std::size_t row = 0; row < r; ++row)
          for (std::size_t j = 0; j < p.cols(); ++j) n.value(row, at + j) = p(row, j);
        at += p.cols();
      }
      return;
    }
    case Op::SliceRows: {
      const Tensor& a = P(0);
      if (n.aux.a >= n.aux.b || n.aux.b > a.rows()) throw DimensionError("slice_rows out of range");
      const std::size_t c = a.cols();
      n.value = Tensor::matrix(n.aux.b - n.aux.a, c);
      std::copy(a.values().begin() + static_cast<std::ptrdiff_t>(n.aux.a * c),
                a.values().begin() + static_cast<std::ptrdiff_t>(n.aux.b * c), n.value.values().begin());
      return;
    }
    case Op::SliceCols: {
      const Tensor& a = P(0);
      if (n.aux.a >= n.aux.b || n.aux.b > a.cols()) throw DimensionError("slice_cols out of range");
      const std::size_t w = n.aux.b - n.aux.a;
      n.value = Tensor::matrix(a.rows(), w);
      for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < w; ++j) n.value(i, j) = a(i, n.aux.a + j);
      return;
    }
    case Op::GatherRows: {
      const Tensor& a = P(0);
      const std::size_t c = a.cols();
      if (n.aux.index.empty()) throw DimensionError("gather_rows with no indices");
      n.value = Tensor::matrix(n.aux.index.size(), c);
      for (std::size_t i = 0; i < n.aux.index.size(); ++i) {
        const std::size_t r = n.aux.index[i];
        if (r >= a.rows()) throw DimensionError("gather_rows index " + std::to_string(r) + " out of range");
        std::copy(a.row(r).begin(), a.row(r).end(), n.value.row(i).begin());
      }
      return;
    }
    case Op::GatherElements: {
      const Tensor& a = P(0);
      if (n.aux.index.empty()) throw DimensionError("gather_elements with no indices");
      n.value = Tensor({n.aux.index.size()});
      for (std::size_t i = 0; i < n.aux.index.size(); ++i) {
        if (n.aux.index[i] >= a.size()) throw DimensionError("gather_elements index out of range");
        n.value[i] = a[n.aux.index[i]];
      }
      return;
    }
    case Op::Stack: {
      if (n.parents.size() != n.aux.a * n.aux.b) throw DimensionError("stack count mismatch");
      n.value = Tensor::matrix(n.aux.a, n.aux.b);
      for (std::size_t i = 0; i < n.parents.size(); ++i) {
        if (P(i).size() != 1) throw DimensionError("stack expects single-element inputs");
        n.value[i] = P(i)[0];
      }
      return;
    }
  }
}

void Graph::backward(Var root) {
  if (root.graph != this) throw ContractError("backward root belongs to another graph");
  const Node& r = nodes_[root.id];
  if (r.value.size() != 1) throw ContractError("backward needs a scalar root, got " + r.value.shape_string());
  for (std::size_t i = 0; i <= root.id; ++i) {
    Node& n = nodes_[i];
    if (n.needs_grad)
      n.grad.assign(n.value.size(), 0.0);
    else
      n.grad.clear();
  }
  if (!nodes_[root.id].needs_grad) return;
  nodes_[root.id].grad[0] = 1.0;
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad) continue;
    if (n.op == Op::Leaf) {
      if (n.leaf_grad.size() != n.grad.size()) n.leaf_grad.assign(n.grad.size(), 0.0);
      for (std::size_t j = 0; j < n.grad.size(); ++j) n.leaf_grad[j] += n.grad[j];
      if (n.bound) {
        auto& g = n.bound->ensure_grad();
        for (std::size_t j = 0; j < n.grad.size(); ++j) g[j] += n.grad[j];
      }
      continue;
    }
    propagate(i);
  }
  if (check_finite_) {
    for (std::size_t i = 0; i <= root.id; ++i)
      for (double g : nodes_[i].grad)
        if (!std::isfinite(g)) throw NumericError(std::string("non-finite gradient at ") + op_name(nodes_[i].op));
  }
}

void Graph::propagate(std::size_t id) {
  Node& n = nodes_[id];
  const std::vector<double>& dy = n.grad;
  auto PN = [&](std::size_t i) -> Node& { return nodes_[n.parents[i]]; };
  auto wants = [&](std::size_t i) { return PN(i).needs_grad; };

  switch (n.op) {
    case Op::Leaf:
      return;
    case Op::MatMul: {
      Node& a = PN(0);
      Node& b = PN(1);
      const std::size_t m = a.value.rows(), k = a.value.cols(), c = b.value.cols();
      if (a.needs_grad) kernels::matmul_nt_acc(dy.data(), b.value.values().data(), a.grad.data(), m, c, k);
      if (b.needs_grad) kernels::matmul_tn_acc(a.value.values().data(), dy.data(), b.grad.data(), m, k, c);
      return;
    }
    case Op::Transpose: {
      if (!wants(0)) return;
      Node& a = PN(0);
      const std::size_t r = a.value.rows(), c = a.value.cols();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) a.grad[i * c + j] += dy[j * r + i];
      return;
    }
    case Op::Add:
    case Op::Sub:
    case Op::Mul: {
      Node& a = PN(0);
      Node& b = PN(1);
      const bool a_scalar = a.value.size() == 1 && b.value.size() != 1;
      const bool b_scalar = b.value.size() == 1 && a.value.size() != 1;
      for (std::size_t i = 0; i < dy.size(); ++i) {
        const std::size_t ia = a_scalar ? 0 : i;
        const std::size_t ib = b_scalar ? 0 : i;
        double ga = dy[i], gb = dy[i];
        if (n.op == Op::Sub) gb = -dy[i];
        if (n.op == Op::Mul) {
          ga = dy[i] * b.value[ib];
          gb = dy[i] * a.value[ia];
        }
        if (a.needs_grad) a.grad[ia] += ga;
        if (b.needs_grad) b.grad[ib] += gb;
      }
      return;
    }
    case Op::Scale:
    case Op::Relu:
    case Op::Exp:
    case Op::Log:
    case Op::Square:
    case Op::Softplus: {
      if (!wants(0)) return;
      Node& a = PN(0);
      auto x = a.value.values();
      auto y = n.value.values();
      for (std::size_t i = 0; i < dy.size(); ++i) {
        double d = 0.0;
        switch (n.op) {
          case Op::Scale: d = n.aux.scalar; break;
          case Op::Relu: d = x[i] > 0.0 ? 1.0 : 0.0; break;
          case Op::Exp: d = y[i]; break;
          case Op::Log: d = 1.0 / x[i]; break;
          case Op::Square: d = 2.0 * x[i]; break;
          default: d = sigmoid(x[i]); break;
        }
        a.grad[i] += dy[i] * d;
      }
      return;
    }
    case Op::Sum:
    case Op::Mean: {
      if (!wants(0)) return;
      Node& a = PN(0);
      const double g = n.op == Op::Mean ? dy[0] / static_cast<double>(a.value.size()) : dy[0];
      for (auto& v : a.grad) v += g;
      return;
    }
    case Op::Softmax: {
      if (!wants(0)) return;
      Node& a = PN(0);
      const std::size_t r = n.value.rows(), c = n.value.cols();
      for (std::size_t i = 0; i < r; ++i) {
        const std::size_t visible = i + n.aux.a + 1;
        double dot = 0.0;
        for (std::size_t j = 0; j < visible; ++j) dot += n.value(i, j) * dy[i * c + j];
        for (std::size_t j = 0; j < visible; ++j) a.grad[i * c + j] += n.value(i, j) * (dy[i * c + j] - dot);
      }
      return;
    }
    case Op::RmsNorm: {
      Node& xn = PN(0);
      Node& gn = PN(1);
      const Tensor& x = xn.value;
      const Tensor& g = gn.value;
      const std::size_t r = x.rows(), d = x.cols();
      for (std::size_t i = 0; i < r; ++i) {
        double ms = 0.0;
        for (std::size_t j = 0; j < d; ++j) ms += x.values()[i * d + j] * x.values()[i * d + j];
        ms /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(ms + n.aux.scalar);
        double proj = 0.0;
        for (std::size_t j = 0; j < d; ++j) proj += dy[i * d + j] * g[j] * x.values()[i * d + j];
        for (std::size_t j = 0; j < d; ++j) {
          const double xv = x.values()[i * d + j];
          if (gn.needs_grad) gn.grad[j] += dy[i * d + j] * xv * inv;
          if (xn.needs_grad)
            xn.grad[i * d + j] += inv * dy[i * d + j] * g[j] - xv * inv * inv * inv * proj / static_cast<double>(d);
        }
      }
      return;
    }
    case Op::L2Normalize: {
      if (!wants(0)) return;
      Node& xn = PN(0);
      const Tensor& x = xn.value;
      const std::size_t r = x.rows(), d = x.cols();
      for (std::size_t i = 0; i < r; ++i) {
        double ss = 0.0;
        for (std::size_t j = 0; j < d; ++j) ss += x.values()[i * d + j] * x.values()[i * d + j];
        const double norm = std::sqrt(ss + n.aux.scalar);
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += n.value.values()[i * d + j] * dy[i * d + j];
        for (std::size_t j = 0; j < d; ++j)
          xn.grad[i * d + j] += (dy[i * d + j] - n.value.values()[i * d + j] * dot) / norm;
      }
      return;
    }
    case Op::MaxOverRows:
    case Op::RowMax: {
      if (!wants(0)) return;
      Node& a = PN(0);
      const std::size_t c = n.op == Op::MaxOverRows ? a.value.size() : a.value.cols();
      for (std::size_t i = 0; i < n.aux.index.size(); ++i) a.grad[i * c + n.aux.index[i]] += dy[i];
      return;
    }
    case Op::ConcatRows: {
      std::size_t at = 0;
      for (std::size_t p = 0; p < n.parents.size(); ++p) {
        Node& a = PN(p);
        const std::size_t sz = a.value.size();
        if (a.needs_grad)
          for (std::size_t j = 0; j < sz; ++j) a.grad[j] += dy[at + j];
        at += sz;
      }
      return;
    }
    case Op::ConcatCols: {
      const std::size_t r = n.value.rows(), total = n.value.cols();
      std::size_t at = 0;
      for (std::size_t p = 0; p < n.parents.size(); ++p) {
        Node& a = PN(p);
        const std::size_t c = a.value.cols();
        if (a.needs_grad)
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) a.grad[i * c + j] += dy[i * total + at + j];
        at += c;
      }
      return;
    }
    case Op::SliceRows: {
      if (!wants(0)) return;
      Node& a = PN(0);
      const std::size_t off = n.aux.a * a.value.cols();
      for (std::size_t j = 0; j < dy.size(); ++j) a.grad[off + j] += dy[j];
      return;
    }
    case Op::SliceCols: {
      if (!wants(0)) return;
      Node& a = PN(0);
      const std::size_t c = a.value.cols(), w = n.value.cols();
      for (std::size_t i = 0; i < n.value.rows(); ++i)
        for (std::size_t j = 0; j < w; ++j) a.grad[i * c + n.aux.a + j] += dy[i * w + j];
      return;
    }
    case Op::GatherRows: {
      if (!wants(0)) return;
      Node& a = PN(0);
      const std::size_t c = a.value.cols();
      for (std::size_t i = 0; i < n.aux.index.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) a.grad[n.aux.index[i] * c + j] += dy[i * c + j];
      return;
    }
    case Op::GatherElements: {
      if (!wants(0)) return;
      Node& a = PN(0);
      for (std::size_t i = 0; i < n.aux.index.size(); ++i) a.grad[n.aux.index[i]] += dy[i];
      return;
    }
    case Op::Stack: {
      for (std::size_t i = 0; i < n.parents.size(); ++i)
        if (PN(i).needs_grad) PN(i).grad[0] += dy[i];
      return;
    }
  }
}

bool Graph::replay_matches() const {
  for (const Node& n : nodes_) {
    if (n.op == Op::Leaf) continue;
    Node copy;
    copy.op = n.op;
    copy.parents = n.parents;
    copy.aux = n.aux;
    evaluate(copy, nullptr);
    if (!copy.value.same_shape(n.value)) return false;
    if (std::memcmp(copy.value.values().data(), n.value.values().data(), n.value.size() * sizeof(double)) != 0)
      return false;
  }
  return true;
}

// ---- op constructors -------------------------------------------------------

Var matmul(Var a, Var b) { return graph_of(a, b).push(Op::MatMul, {a.id, b.id}); }
Var transpose(Var a) { return graph_of(a).push(Op::Transpose, {a.id}); }
Var add(Var a, Var b) { return graph_of(a, b).push(Op::Add, {a.id, b.id}); }
Var sub(Var a, Var b) { return graph_of(a, b).push(Op::Sub, {a.id, b.id}); }
Var mul(Var a, Var b) { return graph_of(a, b).push(Op::Mul, {a.id, b.id}); }
Var scale(Var a, double s) {
  Graph::Aux aux;
  aux.scalar = s;
  return graph_of(a).push(Op::Scale, {a.id}, std::move(aux));
}
Var relu(Var a) { return graph_of(a).push(Op::Relu, {a.id}); }
Var exp(Var a) { return graph_of(a).push(Op::Exp, {a.id}); }
Var log(Var a) { return graph_of(a).push(Op::Log, {a.id}); }
Var square(Var a) { return graph_of(a).push(Op::Square, {a.id}); }
Var softplus(Var a) { return graph_of(a).push(Op::Softplus, {a.id}); }
Var sum(Var a) { return graph_of(a).push(Op::Sum, {a.id}); }
Var mean(Var a) { return graph_of(a).push(Op::Mean, {a.id}); }

Var softmax_causal(Var scores) { return softmax_causal(scores, 0); }

Var softmax_causal(Var scores, std::size_t offset) {
  Graph::Aux aux;
  aux.a = offset;
  return graph_of(scores).push(Op::Softmax, {scores.id}, std::move(aux));
}

Var rms_norm(Var x, Var gain, double eps) {
  Graph::Aux aux;
  aux.scalar = eps;
  return graph_of(x, gain).push(Op::RmsNorm, {x.id, gain.id}, std::move(aux));
}

Var l2_normalize(Var x, double eps) {
  if (eps < 0.0) throw ContractError("l2_normalize eps must be non-negative");
  Graph::Aux aux;
  aux.scalar = eps;
  return graph_of(x).push(Op::L2Normalize, {x.id}, std::move(aux));
}

MaxResult max_over_rows(Var s) {
  Graph& g = graph_of(s);
  Var v = g.push(Op::MaxOverRows, {s.id});
  return {v, g.node(v.id).aux.index[0]};
}

RowMaxResult row_max(Var x) {
  Graph& g = graph_of(x);
  if (x.value().rank() != 2) throw DimensionError("row_max needs a matrix");
  Var v = g.push(Op::RowMax, {x.id});
  return {v, g.node(v.id).aux.index};
}

namespace {

Var concat(Op op, std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat of zero parts");
  Graph& g = graph_of(parts[0]);
  std::vector<std::size_t> ids;
  ids.reserve(parts.size());
  for (const Var& p : parts) {
    if (p.graph != &g) throw ContractError("concat operands live on different graphs");
    ids.push_back(p.id);
  }
  return g.push(op, std::move(ids));
}

}  // namespace

Var concat_rows(std::span<const Var> parts) { return concat(Op::ConcatRows, parts); }
Var concat_cols(std::span<const Var> parts) { return concat(Op::ConcatCols, parts); }

Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  Graph::Aux aux;
  aux.a = begin;
  aux.b = end;
  return graph_of(x).push(Op::SliceRows, {x.id}, std::move(aux));
}

Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  Graph::Aux aux;
  aux.a = begin;
  aux.b = end;
  return graph_of(x).push(Op::SliceCols, {x.id}, std::move(aux));
}

Var gather_rows(Var table, std::span<const std::size_t> rows) {
  Graph::Aux aux;
  aux.index.assign(rows.begin(), rows.end());
  return graph_of(table).push(Op::GatherRows, {table.id}, std::move(aux));
}

Var gather_elements(Var x, std::span<const std::size_t> flat_index) {
  Graph::Aux aux;
  aux.index.assign(flat_index.begin(), flat_index.end());
  return graph_of(x).push(Op::GatherElements, {x.id}, std::move(aux));
}

Var stack(std::span<const Var> scalars, std::size_t rows, std::size_t cols) {
  if (scalars.empty()) throw DimensionError("stack of zero values");
  Graph& g = graph_of(scalars[0]);
  std::vector<std::size_t> ids;
  ids.reserve(scalars.size());
  for (const Var& s : scalars) ids.push_back(s.id);
  Graph::Aux aux;
  aux.a = rows;
  aux.b = cols;
  return g.push(Op::Stack, std::move(ids), std::move(aux));
}

// ---- gradcheck -------------------------------------------------------------

namespace {

struct Evaluation {
  double value = 0.0;
  std::uint64_t signature = 0;
};

Evaluation evaluate_fn(const ScalarFn& f, std::span<const NamedParam> params) {
  Graph g;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(g.leaf(*p.tensor, true));
  Var out = f(g, vars);
  return {out.item(), g.branch_signature()};
}

}  // namespace

GradcheckReport gradcheck(const ScalarFn& f, std::span<const NamedParam> params,
                          const GradcheckOptions& options) {
  if (!(options.h >= 1e-7 && options.h <= 1e-3))
    throw ContractError("gradcheck step h must lie in [1e-7, 1e-3]");
  if (params.empty()) throw ContractError("gradcheck needs at least one parameter");

  const Evaluation first = evaluate_fn(f, params);
  const Evaluation second = evaluate_fn(f, params);
  if (std::memcmp(&first.value, &second.value, sizeof(double)) != 0 || first.signature != second.signature)
    throw DeterminismError("function returned different values on identical inputs");

  // Reverse-mode gradients.
  std::vector<std::vector<double>> analytic;
  {
    Graph g;
    std::vector<Var> vars;
    for (const auto& p : params) vars.push_back(g.leaf(*p.tensor, true));
    Var out = f(g, vars);
    g.backward(out);
    for (const Var& v : vars) {
      const auto& gr = v.grad();
      analytic.push_back(gr.empty() ? std::vector<double>(v.value().size(), 0.0) : gr);
    }
  }

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t p = 0; p < params.size(); ++p)
    for (std::size_t i = 0; i < params[p].tensor->size(); ++i) coords.emplace_back(p, i);
  if (options.samples > 0 && options.samples < coords.size()) {
    std::mt19937_64 rng(options.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(options.samples);
    std::sort(coords.begin(), coords.end());
  }

  GradcheckReport report;
  for (auto [p, i] : coords) {
    Tensor& t = *params[p].tensor;
    const double original = t[i];
    t[i] = original + options.h;
    const Evaluation plus = evaluate_fn(f, params);
    t[i] = original - options.h;
    const Evaluation minus = evaluate_fn(f, params);
    t[i] = original;

    GradcheckEntry e;
    e.param = params[p].name;
    e.index = i;
    e.numeric = (plus.value - minus.value) / (2.0 * options.h);
    e.analytic = analytic[p][i];
    if (plus.signature != first.signature || minus.signature != first.signature) {
      e.kink_skipped = true;
      ++report.kink_skipped;
      report.entries.push_back(e);
      continue;
    }
    const double diff = std::abs(e.numeric - e.analytic);
    const double scale_ = std::max(std::abs(e.numeric), std::abs(e.analytic));
    if (scale_ < options.small_value) {
      e.rel_error = diff;
      e.pass = diff < options.abs_tol;
    } else {
      e.rel_error = diff / scale_;
      e.pass = e.rel_error < options.tol;
    }
    report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
    report.pass = report.pass && e.pass;
    report.entries.push_back(e);
  }
  return report;
}

}  // namespace cemb
