#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace bondi {

// Variables of the symbolic layer. Scenario fields may use (u, theta, psi);
// r is reserved for the radial structure assembled internally.
enum class Var : uint8_t { u = 0, theta = 1, psi = 2, r = 3 };

constexpr int kNumVars = 4;

struct EvalPoint {
  double u = 0.0;
  double theta = 0.0;
  double psi = 0.0;
  double r = 0.0;

  double operator[](Var v) const {
    switch (v) {
      case Var::u: return u;
      case Var::theta: return theta;
      case Var::psi: return psi;
      case Var::r: return r;
    }
    return 0.0;
  }
};

struct ParseError : std::runtime_error {
  ParseError(const std::string& msg, size_t off)
      : std::runtime_error(msg + " (at byte " + std::to_string(off) + ")"),
        offset(off) {}
  size_t offset;
};

struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class UnaryFn : uint8_t {
  neg, sin, cos, tan, cot, sec, csc, exp, ln, sqrt, sinh, cosh
};

enum class BinOp : uint8_t { add, sub, mul, div, pow };

struct ExprNode;
using NodePtr = std::shared_ptr<const ExprNode>;

struct ExprNode {
  enum class Kind : uint8_t { constant, variable, unary, binary } kind;
  double value = 0.0;  // constant
  Var var = Var::u;    // variable
  UnaryFn fn = UnaryFn::neg;
  BinOp op = BinOp::add;
  NodePtr a, b;
};

// Immutable symbolic expression over (u, theta, psi, r). Construction folds
// constants and the 0/1 identities so derivative trees stay compact. Nodes
// are shared; all operations are pure and safe to use from multiple threads.
class Expr {
 public:
  Expr() : node_(zero_node()) {}
  explicit Expr(NodePtr n) : node_(std::move(n)) {}

  static Expr constant(double v);
  static Expr variable(Var v);

  const NodePtr& node() const { return node_; }
  bool is_constant() const { return node_->kind == ExprNode::Kind::constant; }
  bool is_constant(double v) const {
    return is_constant() && node_->value == v;
  }
  double constant_value() const { return node_->value; }

  double eval(const EvalPoint& p) const;
  bool depends_on(Var v) const;

  Expr operator-() const;

 private:
  static const NodePtr& zero_node();
  NodePtr node_;
};

Expr operator+(const Expr& x, const Expr& y);
Expr operator-(const Expr& x, const Expr& y);
Expr operator*(const Expr& x, const Expr& y);
Expr operator/(const Expr& x, const Expr& y);
inline Expr operator+(const Expr& x, double c) { return x + Expr::constant(c); }
inline Expr operator+(double c, const Expr& x) { return Expr::constant(c) + x; }
inline Expr operator-(const Expr& x, double c) { return x - Expr::constant(c); }
inline Expr operator-(double c, const Expr& x) { return Expr::constant(c) - x; }
inline Expr operator*(const Expr& x, double c) { return x * Expr::constant(c); }
inline Expr operator*(double c, const Expr& x) { return Expr::constant(c) * x; }
inline Expr operator/(const Expr& x, double c) { return x / Expr::constant(c); }
inline Expr operator/(double c, const Expr& x) { return Expr::constant(c) / x; }

Expr pow(const Expr& base, const Expr& exponent);
inline Expr pow(const Expr& base, double e) { return pow(base, Expr::constant(e)); }
Expr apply(UnaryFn fn, const Expr& x);
inline Expr sin(const Expr& x) { return apply(UnaryFn::sin, x); }
inline Expr cos(const Expr& x) { return apply(UnaryFn::cos, x); }
inline Expr tan(const Expr& x) { return apply(UnaryFn::tan, x); }
inline Expr cot(const Expr& x) { return apply(UnaryFn::cot, x); }
inline Expr sec(const Expr& x) { return apply(UnaryFn::sec, x); }
inline Expr csc(const Expr& x) { return apply(UnaryFn::csc, x); }
inline Expr exp(const Expr& x) { return apply(UnaryFn::exp, x); }
inline Expr ln(const Expr& x) { return apply(UnaryFn::ln, x); }
inline Expr sqrt(const Expr& x) { return apply(UnaryFn::sqrt, x); }
inline Expr sinh(const Expr& x) { return apply(UnaryFn::sinh, x); }
inline Expr cosh(const Expr& x) { return apply(UnaryFn::cosh, x); }

// Parses an infix expression. Precedence: ^  >  unary -  >  * /  >  + -,
// left-associative except ^ (right). allow_r admits the reserved radial
// variable; scenario field expressions must leave it off.
Expr parse(std::string_view text, bool allow_r = false);

// Exact symbolic derivative; closed under the grammar.
Expr diff(const Expr& e, Var v);

// Constant folding, 0/1 identities, double-negation removal, and structural
// deduplication of equal subtrees. No algebraic canonicalization beyond that.
Expr simplify(const Expr& e);

// Substitutes `replacement` for every occurrence of `v`.
Expr subst(const Expr& e, Var v, const Expr& replacement);

std::string to_string(const Expr& e);

// ---------------------------------------------------------------------------
// Batched evaluation: a flattened DAG shared by several roots, evaluated over
// arrays of points in chunks. This is the hot path for grid and radial sweeps.

class Tape {
 public:
  struct Instr {
    uint8_t op;        // OpCode
    uint32_t a = 0, b = 0;  // operand slots (or var index for load)
    uint32_t slot = 0;      // output slot
    double imm = 0.0;
  };

  // Bindings: each variable is either a scalar (broadcast) or an array of
  // length n.
  struct Bindings {
    std::span<const double> v[kNumVars];
    size_t n = 1;

    void set(Var var, std::span<const double> arr) { v[int(var)] = arr; }
    void set(Var var, const double& scalar) {
      v[int(var)] = std::span<const double>(&scalar, 1);
    }
  };

  // Evaluates all roots over the bindings; out[i] must hold n doubles and
  // receives root i. Throws DomainError on any non-finite intermediate.
  void eval(const Bindings& b, std::span<const std::span<double>> out) const;

  // Convenience: single root, single point.
  double eval_one(const EvalPoint& p) const;

  size_t num_roots() const { return roots_.size(); }
  size_t size() const { return instrs_.size(); }

  friend Tape compile(std::span<const Expr> roots);

 private:
  std::vector<Instr> instrs_;
  std::vector<uint32_t> roots_;  // slot of each root after final instr
  uint32_t num_slots_ = 0;
};

Tape compile(std::span<const Expr> roots);
inline Tape compile(std::initializer_list<Expr> roots) {
  return compile(std::span<const Expr>(roots.begin(), roots.size()));
}

}  // namespace bondi
