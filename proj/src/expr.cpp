#include "bondi/expr.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <map>
#include <unordered_map>

namespace bondi {

namespace {

using Kind = ExprNode::Kind;

NodePtr make_const(double v) {
  auto n = std::make_shared<ExprNode>();
  n->kind = Kind::constant;
  n->value = v;
  return n;
}

NodePtr make_var(Var v) {
  auto n = std::make_shared<ExprNode>();
  n->kind = Kind::variable;
  n->var = v;
  return n;
}

NodePtr make_unary(UnaryFn fn, NodePtr a) {
  auto n = std::make_shared<ExprNode>();
  n->kind = Kind::unary;
  n->fn = fn;
  n->a = std::move(a);
  return n;
}

NodePtr make_binary(BinOp op, NodePtr a, NodePtr b) {
  auto n = std::make_shared<ExprNode>();
  n->kind = Kind::binary;
  n->op = op;
  n->a = std::move(a);
  n->b = std::move(b);
  return n;
}

double apply_unary_value(UnaryFn fn, double x, const char* what) {
  double r = 0.0;
  switch (fn) {
    case UnaryFn::neg: r = -x; break;
    case UnaryFn::sin: r = std::sin(x); break;
    case UnaryFn::cos: r = std::cos(x); break;
    case UnaryFn::tan: r = std::tan(x); break;
    case UnaryFn::cot: {
      double s = std::sin(x);
      if (s == 0.0) throw DomainError("cot at a multiple of pi");
      r = std::cos(x) / s;
      break;
    }
    case UnaryFn::sec: {
      double c = std::cos(x);
      if (c == 0.0) throw DomainError("sec at an odd multiple of pi/2");
      r = 1.0 / c;
      break;
    }
    case UnaryFn::csc: {
      double s = std::sin(x);
      if (s == 0.0) throw DomainError("csc at a multiple of pi");
      r = 1.0 / s;
      break;
    }
    case UnaryFn::exp: r = std::exp(x); break;
    case UnaryFn::ln:
      if (x <= 0.0) throw DomainError("ln of a non-positive value");
      r = std::log(x);
      break;
    case UnaryFn::sqrt:
      if (x < 0.0) throw DomainError("sqrt of a negative value");
      r = std::sqrt(x);
      break;
    case UnaryFn::sinh: r = std::sinh(x); break;
    case UnaryFn::cosh: r = std::cosh(x); break;
  }
  if (!std::isfinite(r)) throw DomainError(std::string("non-finite result of ") + what);
  return r;
}

double apply_binary_value(BinOp op, double x, double y) {
  double r = 0.0;
  switch (op) {
    case BinOp::add: r = x + y; break;
    case BinOp::sub: r = x - y; break;
    case BinOp::mul: r = x * y; break;
    case BinOp::div:
      if (y == 0.0) throw DomainError("division by zero");
      r = x / y;
      break;
    case BinOp::pow:
      r = std::pow(x, y);
      break;
  }
  if (!std::isfinite(r)) throw DomainError("non-finite arithmetic result");
  return r;
}

const char* fn_name(UnaryFn fn) {
  switch (fn) {
    case UnaryFn::neg: return "-";
    case UnaryFn::sin: return "sin";
    case UnaryFn::cos: return "cos";
    case UnaryFn::tan: return "tan";
    case UnaryFn::cot: return "cot";
    case UnaryFn::sec: return "sec";
    case UnaryFn::csc: return "csc";
    case UnaryFn::exp: return "exp";
    case UnaryFn::ln: return "ln";
    case UnaryFn::sqrt: return "sqrt";
    case UnaryFn::sinh: return "sinh";
    case UnaryFn::cosh: return "cosh";
  }
  return "?";
}

const char* var_name(Var v) {
  switch (v) {
    case Var::u: return "u";
    case Var::theta: return "theta";
    case Var::psi: return "psi";
    case Var::r: return "r";
  }
  return "?";
}

}  // namespace

const NodePtr& Expr::zero_node() {
  static const NodePtr zero = make_const(0.0);
  return zero;
}

Expr Expr::constant(double v) { return Expr(make_const(v)); }
Expr Expr::variable(Var v) { return Expr(make_var(v)); }

Expr Expr::operator-() const {
  if (is_constant()) return constant(-constant_value());
  if (node_->kind == Kind::unary && node_->fn == UnaryFn::neg)
    return Expr(node_->a);
  return Expr(make_unary(UnaryFn::neg, node_));
}

Expr operator+(const Expr& x, const Expr& y) {
  if (x.is_constant() && y.is_constant())
    return Expr::constant(x.constant_value() + y.constant_value());
  if (x.is_constant(0.0)) return y;
  if (y.is_constant(0.0)) return x;
  return Expr(make_binary(BinOp::add, x.node(), y.node()));
}

Expr operator-(const Expr& x, const Expr& y) {
  if (x.is_constant() && y.is_constant())
    return Expr::constant(x.constant_value() - y.constant_value());
  if (y.is_constant(0.0)) return x;
  if (x.is_constant(0.0)) return -y;
  if (x.node() == y.node()) return Expr::constant(0.0);
  return Expr(make_binary(BinOp::sub, x.node(), y.node()));
}

Expr operator*(const Expr& x, const Expr& y) {
  if (x.is_constant() && y.is_constant())
    return Expr::constant(x.constant_value() * y.constant_value());
  if (x.is_constant(0.0) || y.is_constant(0.0)) return Expr::constant(0.0);
  if (x.is_constant(1.0)) return y;
  if (y.is_constant(1.0)) return x;
  if (x.is_constant(-1.0)) return -y;
  if (y.is_constant(-1.0)) return -x;
  return Expr(make_binary(BinOp::mul, x.node(), y.node()));
}

Expr operator/(const Expr& x, const Expr& y) {
  if (x.is_constant() && y.is_constant()) {
    if (y.constant_value() == 0.0) throw DomainError("division by constant zero");
    return Expr::constant(x.constant_value() / y.constant_value());
  }
  if (x.is_constant(0.0)) return Expr::constant(0.0);
  if (y.is_constant(1.0)) return x;
  if (y.is_constant(-1.0)) return -x;
  return Expr(make_binary(BinOp::div, x.node(), y.node()));
}

Expr pow(const Expr& base, const Expr& exponent) {
  if (base.is_constant() && exponent.is_constant())
    return Expr::constant(
        apply_binary_value(BinOp::pow, base.constant_value(), exponent.constant_value()));
  if (exponent.is_constant(0.0)) return Expr::constant(1.0);
  if (exponent.is_constant(1.0)) return base;
  if (base.is_constant(1.0)) return Expr::constant(1.0);
  return Expr(make_binary(BinOp::pow, base.node(), exponent.node()));
}

Expr apply(UnaryFn fn, const Expr& x) {
  if (fn == UnaryFn::neg) return -x;
  if (x.is_constant())
    return Expr::constant(apply_unary_value(fn, x.constant_value(), fn_name(fn)));
  return Expr(make_unary(fn, x.node()));
}

bool Expr::depends_on(Var v) const {
  // Iterative DFS with a visited set; DAGs can be large.
  std::vector<const ExprNode*> stack{node_.get()};
  std::unordered_map<const ExprNode*, bool> seen;
  while (!stack.empty()) {
    const ExprNode* n = stack.back();
    stack.pop_back();
    if (seen.count(n)) continue;
    seen[n] = true;
    switch (n->kind) {
      case Kind::constant: break;
      case Kind::variable:
        if (n->var == v) return true;
        break;
      case Kind::unary: stack.push_back(n->a.get()); break;
      case Kind::binary:
        stack.push_back(n->a.get());
        stack.push_back(n->b.get());
        break;
    }
  }
  return false;
}

double Expr::eval(const EvalPoint& p) const {
  // Memoized over shared nodes; recursion depth is bounded by tree depth,
  // which eager folding keeps moderate.
  std::unordered_map<const ExprNode*, double> memo;
  struct Rec {
    const EvalPoint& p;
    std::unordered_map<const ExprNode*, double>& memo;
    double run(const ExprNode* n) {
      auto it = memo.find(n);
      if (it != memo.end()) return it->second;
      double r = 0.0;
      switch (n->kind) {
        case Kind::constant: r = n->value; break;
        case Kind::variable: r = p[n->var]; break;
        case Kind::unary: r = apply_unary_value(n->fn, run(n->a.get()), fn_name(n->fn)); break;
        case Kind::binary: {
          double x = run(n->a.get());
          double y = run(n->b.get());
          r = apply_binary_value(n->op, x, y);
          break;
        }
      }
      memo[n] = r;
      return r;
    }
  } rec{p, memo};
  return rec.run(node_.get());
}

// ---------------------------------------------------------------------------
// Parser

namespace {

struct Parser {
  std::string_view text;
  size_t pos = 0;
  bool allow_r;

  void skip_ws() {
    while (pos < text.size() && std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
  }

  bool eat(char c) {
    skip_ws();
    if (pos < text.size() && text[pos] == c) {
      ++pos;
      return true;
    }
    return false;
  }

  char peek() {
    skip_ws();
    return pos < text.size() ? text[pos] : '\0';
  }

  [[noreturn]] void fail(const std::string& msg) { throw ParseError(msg, pos); }

  Expr parse_expr() {
    Expr e = parse_term();
    for (;;) {
      char c = peek();
      if (c == '+') {
        ++pos;
        e = e + parse_term();
      } else if (c == '-') {
        ++pos;
        e = e - parse_term();
      } else {
        return e;
      }
    }
  }

  Expr parse_term() {
    Expr e = parse_factor();
    for (;;) {
      char c = peek();
      if (c == '*') {
        ++pos;
        e = e * parse_factor();
      } else if (c == '/') {
        ++pos;
        e = e / parse_factor();
      } else {
        return e;
      }
    }
  }

  // unary minus binds below ^ : -x^2 is -(x^2)
  Expr parse_factor() {
    if (peek() == '-') {
      ++pos;
      return -parse_factor();
    }
    return parse_power();
  }

  Expr parse_power() {
    Expr base = parse_primary();
    if (peek() == '^') {
      ++pos;
      // right-associative; exponent may carry a unary minus
      Expr e = parse_factor();
      return pow(base, e);
    }
    return base;
  }

  Expr parse_primary() {
    skip_ws();
    if (pos >= text.size()) fail("unexpected end of expression");
    char c = text[pos];
    if (c == '(') {
      ++pos;
      Expr e = parse_expr();
      if (!eat(')')) fail("expected ')'");
      return e;
    }
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') return parse_number();
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') return parse_ident();
    fail(std::string("unexpected character '") + c + "'");
  }

  Expr parse_number() {
    size_t start = pos;
    const char* begin = text.data() + pos;
    char* end = nullptr;
    double v = std::strtod(begin, &end);
    if (end == begin) fail("malformed number");
    pos = start + size_t(end - begin);
    return Expr::constant(v);
  }

  Expr parse_ident() {
    size_t start = pos;
    while (pos < text.size() &&
           (std::isalnum(static_cast<unsigned char>(text[pos])) || text[pos] == '_'))
      ++pos;
    std::string_view name = text.substr(start, pos - start);
    if (name == "u") return Expr::variable(Var::u);
    if (name == "theta") return Expr::variable(Var::theta);
    if (name == "psi") return Expr::variable(Var::psi);
    if (name == "pi") return Expr::constant(M_PI);
    if (name == "r") {
      if (!allow_r) {
        pos = start;
        fail("'r' is reserved; field expressions depend on (u, theta, psi) only");
      }
      return Expr::variable(Var::r);
    }
    static const std::map<std::string_view, UnaryFn> fns = {
        {"sin", UnaryFn::sin},   {"cos", UnaryFn::cos},  {"tan", UnaryFn::tan},
        {"cot", UnaryFn::cot},   {"sec", UnaryFn::sec},  {"csc", UnaryFn::csc},
        {"exp", UnaryFn::exp},   {"ln", UnaryFn::ln},    {"sqrt", UnaryFn::sqrt},
        {"sinh", UnaryFn::sinh}, {"cosh", UnaryFn::cosh}};
    auto it = fns.find(name);
    if (it == fns.end()) {
      pos = start;
      fail("unknown identifier '" + std::string(name) + "'");
    }
    if (!eat('(')) fail("expected '(' after function name");
    Expr arg = parse_expr();
    if (!eat(')')) fail("expected ')'");
    return apply(it->second, arg);
  }
};

}  // namespace

Expr parse(std::string_view text, bool allow_r) {
  Parser p{text, 0, allow_r};
  Expr e = p.parse_expr();
  p.skip_ws();
  if (p.pos != text.size()) p.fail("trailing input");
  return e;
}

// ---------------------------------------------------------------------------
// Differentiation

namespace {

struct Differ {
  Var v;
  std::unordered_map<const ExprNode*, Expr> memo;

  Expr run(const NodePtr& n) {
    auto it = memo.find(n.get());
    if (it != memo.end()) return it->second;
    Expr d = derive(n);
    memo.emplace(n.get(), d);
    return d;
  }

  Expr derive(const NodePtr& n) {
    Expr x(n);
    switch (n->kind) {
      case Kind::constant: return Expr::constant(0.0);
      case Kind::variable:
        return Expr::constant(n->var == v ? 1.0 : 0.0);
      case Kind::unary: {
        Expr a(n->a);
        Expr da = run(n->a);
        if (da.is_constant(0.0)) return da;
        switch (n->fn) {
          case UnaryFn::neg: return -da;
          case UnaryFn::sin: return cos(a) * da;
          case UnaryFn::cos: return -(sin(a) * da);
          case UnaryFn::tan: return pow(sec(a), 2.0) * da;
          case UnaryFn::cot: return -(pow(csc(a), 2.0) * da);
          case UnaryFn::sec: return sec(a) * tan(a) * da;
          case UnaryFn::csc: return -(csc(a) * cot(a) * da);
          case UnaryFn::exp: return x * da;
          case UnaryFn::ln: return da / a;
          case UnaryFn::sqrt: return da / (Expr::constant(2.0) * x);
          case UnaryFn::sinh: return cosh(a) * da;
          case UnaryFn::cosh: return sinh(a) * da;
        }
        return Expr::constant(0.0);
      }
      case Kind::binary: {
        Expr a(n->a), b(n->b);
        switch (n->op) {
          case BinOp::add: return run(n->a) + run(n->b);
          case BinOp::sub: return run(n->a) - run(n->b);
          case BinOp::mul: return run(n->a) * b + a * run(n->b);
          case BinOp::div: {
            Expr da = run(n->a), db = run(n->b);
            if (db.is_constant(0.0)) return da / b;
            return (da * b - a * db) / (b * b);
          }
          case BinOp::pow: {
            Expr da = run(n->a), db = run(n->b);
            if (db.is_constant(0.0)) {
              // f(x)^c : c f^(c-1) f' ; avoids ln(f) and its domain edge
              Expr c = b;
              return c * pow(a, c - 1.0) * da;
            }
            // general: f^g (g' ln f + g f'/f)
            return x * (db * ln(a) + b * da / a);
          }
        }
        return Expr::constant(0.0);
      }
    }
    return Expr::constant(0.0);
  }
};

}  // namespace

Expr diff(const Expr& e, Var v) {
  Differ d{v, {}};
  return d.run(e.node());
}

// ---------------------------------------------------------------------------
// Simplification: bottom-up rebuild through the folding constructors with
// structural interning so equal subtrees share one node.

namespace {

struct SimpKey {
  uint8_t kind, tag;
  uint64_t vbits;
  const ExprNode* a;
  const ExprNode* b;
  bool operator==(const SimpKey& o) const {
    return kind == o.kind && tag == o.tag && vbits == o.vbits && a == o.a && b == o.b;
  }
};

struct SimpKeyHash {
  size_t operator()(const SimpKey& k) const {
    size_t h = k.kind * 1315423911u + k.tag;
    h ^= std::hash<uint64_t>()(k.vbits) + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    h ^= std::hash<const void*>()(k.a) + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    h ^= std::hash<const void*>()(k.b) + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    return h;
  }
};

struct Simplifier {
  std::unordered_map<const ExprNode*, Expr> memo;
  std::unordered_map<SimpKey, Expr, SimpKeyHash> interned;

  Expr intern(Expr e) {
    const ExprNode* n = e.node().get();
    SimpKey k{};
    k.kind = uint8_t(n->kind);
    switch (n->kind) {
      case Kind::constant: {
        uint64_t bits;
        std::memcpy(&bits, &n->value, sizeof bits);
        k.vbits = bits;
        break;
      }
      case Kind::variable: k.tag = uint8_t(n->var); break;
      case Kind::unary:
        k.tag = uint8_t(n->fn);
        k.a = n->a.get();
        break;
      case Kind::binary:
        k.tag = uint8_t(n->op) | 0x80;
        k.a = n->a.get();
        k.b = n->b.get();
        break;
    }
    auto [it, fresh] = interned.emplace(k, e);
    return it->second;
  }

  Expr run(const NodePtr& n) {
    auto it = memo.find(n.get());
    if (it != memo.end()) return it->second;
    Expr out;
    switch (n->kind) {
      case Kind::constant: out = Expr(n); break;
      case Kind::variable: out = Expr(n); break;
      case Kind::unary: {
        Expr a = run(n->a);
        out = intern(apply(n->fn, a));
        break;
      }
      case Kind::binary: {
        Expr a = run(n->a), b = run(n->b);
        switch (n->op) {
          case BinOp::add: out = a + b; break;
          case BinOp::sub: out = a - b; break;
          case BinOp::mul: out = a * b; break;
          case BinOp::div: out = a / b; break;
          case BinOp::pow: out = pow(a, b); break;
        }
        out = intern(out);
        break;
      }
    }
    memo.emplace(n.get(), out);
    return out;
  }
};

}  // namespace

Expr simplify(const Expr& e) {
  Simplifier s;
  return s.run(e.node());
}

Expr subst(const Expr& e, Var v, const Expr& replacement) {
  struct Subber {
    Var v;
    const Expr& rep;
    std::unordered_map<const ExprNode*, Expr> memo;
    Expr run(const NodePtr& n) {
      auto it = memo.find(n.get());
      if (it != memo.end()) return it->second;
      Expr out;
      switch (n->kind) {
        case Kind::constant: out = Expr(n); break;
        case Kind::variable: out = (n->var == v) ? rep : Expr(n); break;
        case Kind::unary: out = apply(n->fn, run(n->a)); break;
        case Kind::binary: {
          Expr a = run(n->a), b = run(n->b);
          switch (n->op) {
            case BinOp::add: out = a + b; break;
            case BinOp::sub: out = a - b; break;
            case BinOp::mul: out = a * b; break;
            case BinOp::div: out = a / b; break;
            case BinOp::pow: out = pow(a, b); break;
          }
          break;
        }
      }
      memo.emplace(n.get(), out);
      return out;
    }
  } sub{v, replacement, {}};
  return sub.run(e.node());
}

// ---------------------------------------------------------------------------
// Printing

namespace {

int precedence_of(const ExprNode* n) {
  switch (n->kind) {
    case Kind::constant: return n->value < 0 ? 1 : 5;
    case Kind::variable: return 5;
    case Kind::unary: return n->fn == UnaryFn::neg ? 2 : 5;
    case Kind::binary:
      switch (n->op) {
        case BinOp::add:
        case BinOp::sub: return 1;
        case BinOp::mul:
        case BinOp::div: return 3;
        case BinOp::pow: return 4;
      }
  }
  return 5;
}

void print_node(std::string& out, const ExprNode* n, int parent_prec) {
  int prec = precedence_of(n);
  bool parens = prec < parent_prec;
  if (parens) out += '(';
  switch (n->kind) {
    case Kind::constant: {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.17g", n->value);
      out += buf;
      break;
    }
    case Kind::variable: out += var_name(n->var); break;
    case Kind::unary:
      if (n->fn == UnaryFn::neg) {
        out += '-';
        print_node(out, n->a.get(), 3);
      } else {
        out += fn_name(n->fn);
        out += '(';
        print_node(out, n->a.get(), 0);
        out += ')';
      }
      break;
    case Kind::binary: {
      const char* opstr = "";
      int lp = prec, rp = prec + 1;
      switch (n->op) {
        case BinOp::add: opstr = " + "; rp = prec; break;
        case BinOp::sub: opstr = " - "; break;
        case BinOp::mul: opstr = "*"; rp = prec; break;
        case BinOp::div: opstr = "/"; break;
        case BinOp::pow: opstr = "^"; lp = prec + 1; rp = prec; break;
      }
      print_node(out, n->a.get(), lp);
      out += opstr;
      print_node(out, n->b.get(), rp);
      break;
    }
  }
  if (parens) out += ')';
}

}  // namespace

std::string to_string(const Expr& e) {
  std::string out;
  print_node(out, e.node().get(), 0);
  return out;
}

// ---------------------------------------------------------------------------
// Tape

namespace {

enum OpCode : uint8_t {
  kImm, kVar, kAdd, kSub, kMul, kDiv, kPow, kNeg,
  kSin, kCos, kTan, kCot, kSec, kCsc, kExp, kLn, kSqrt, kSinh, kCosh
};

OpCode opcode_for(UnaryFn fn) {
  switch (fn) {
    case UnaryFn::neg: return kNeg;
    case UnaryFn::sin: return kSin;
    case UnaryFn::cos: return kCos;
    case UnaryFn::tan: return kTan;
    case UnaryFn::cot: return kCot;
    case UnaryFn::sec: return kSec;
    case UnaryFn::csc: return kCsc;
    case UnaryFn::exp: return kExp;
    case UnaryFn::ln: return kLn;
    case UnaryFn::sqrt: return kSqrt;
    case UnaryFn::sinh: return kSinh;
    case UnaryFn::cosh: return kCosh;
  }
  return kNeg;
}

OpCode opcode_for(BinOp op) {
  switch (op) {
    case BinOp::add: return kAdd;
    case BinOp::sub: return kSub;
    case BinOp::mul: return kMul;
    case BinOp::div: return kDiv;
    case BinOp::pow: return kPow;
  }
  return kAdd;
}

}  // namespace

Tape compile(std::span<const Expr> roots) {
  Tape tape;
  std::unordered_map<const ExprNode*, uint32_t> index;  // node -> instr id
  std::vector<Tape::Instr>& instrs = tape.instrs_;

  // Iterative postorder over the DAG.
  struct Frame { const ExprNode* n; int stage; };
  for (const Expr& root : roots) {
    std::vector<Frame> stack{{root.node().get(), 0}};
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (index.count(f.n)) {
        stack.pop_back();
        continue;
      }
      const ExprNode* n = f.n;
      if (n->kind == Kind::unary && f.stage == 0) {
        f.stage = 1;
        if (!index.count(n->a.get())) stack.push_back({n->a.get(), 0});
        continue;
      }
      if (n->kind == Kind::binary && f.stage == 0) {
        f.stage = 1;
        if (!index.count(n->a.get())) stack.push_back({n->a.get(), 0});
        if (!index.count(n->b.get())) stack.push_back({n->b.get(), 0});
        continue;
      }
      Tape::Instr ins{};
      switch (n->kind) {
        case Kind::constant:
          ins.op = kImm;
          ins.imm = n->value;
          break;
        case Kind::variable:
          ins.op = kVar;
          ins.a = uint32_t(n->var);
          break;
        case Kind::unary:
          ins.op = opcode_for(n->fn);
          ins.a = index.at(n->a.get());
          break;
        case Kind::binary:
          ins.op = opcode_for(n->op);
          ins.a = index.at(n->a.get());
          ins.b = index.at(n->b.get());
          break;
      }
      uint32_t id = uint32_t(instrs.size());
      instrs.push_back(ins);
      index.emplace(n, id);
      stack.pop_back();
    }
  }

  // Register allocation: refcount inputs, reuse slots after last use.
  std::vector<uint32_t> uses(instrs.size(), 0);
  auto count_use = [&](const Tape::Instr& ins) {
    if (ins.op == kImm || ins.op == kVar) return;
    uses[ins.a]++;
    if (ins.op >= kAdd && ins.op <= kPow) uses[ins.b]++;
  };
  for (const auto& ins : instrs) count_use(ins);
  for (const Expr& root : roots) uses[index.at(root.node().get())]++;  // keep roots alive

  std::vector<uint32_t> slot_of(instrs.size());
  std::vector<uint32_t> free_slots;
  uint32_t next_slot = 0;
  auto release = [&](uint32_t id) {
    if (--uses[id] == 0) free_slots.push_back(slot_of[id]);
  };
  for (uint32_t id = 0; id < instrs.size(); ++id) {
    Tape::Instr& ins = instrs[id];
    bool binary = ins.op >= kAdd && ins.op <= kPow;
    bool unary = ins.op >= kNeg;
    // rewrite operand ids to slots, then release
    uint32_t sa = 0, sb = 0;
    if (binary || unary) sa = slot_of[ins.a];
    if (binary) sb = slot_of[ins.b];
    uint32_t s;
    if (!free_slots.empty()) {
      s = free_slots.back();
      free_slots.pop_back();
    } else {
      s = next_slot++;
    }
    slot_of[id] = s;
    ins.slot = s;
    if (binary || unary) {
      uint32_t opa = ins.a;
      ins.a = sa;
      release(opa);
    }
    if (binary) {
      uint32_t opb = ins.b;
      ins.b = sb;
      release(opb);
    }
  }
  tape.num_slots_ = next_slot;
  for (const Expr& root : roots) tape.roots_.push_back(slot_of[index.at(root.node().get())]);
  return tape;
}

void Tape::eval(const Bindings& b, std::span<const std::span<double>> out) const {
  if (out.size() != roots_.size())
    throw std::invalid_argument("tape eval: wrong number of output spans");
  constexpr size_t kChunk = 256;
  const size_t n = b.n;
  std::vector<double> work(size_t(num_slots_) * kChunk);
  for (size_t base = 0; base < n; base += kChunk) {
    const size_t m = std::min(kChunk, n - base);
    for (const Instr& ins : instrs_) {
      double* dst = work.data() + size_t(ins.slot) * kChunk;
      switch (ins.op) {
        case kImm:
          for (size_t i = 0; i < m; ++i) dst[i] = ins.imm;
          break;
        case kVar: {
          const auto& arr = b.v[ins.a];
          if (arr.empty()) throw std::invalid_argument("tape eval: unbound variable");
          if (arr.size() == 1) {
            for (size_t i = 0; i < m; ++i) dst[i] = arr[0];
          } else {
            for (size_t i = 0; i < m; ++i) dst[i] = arr[base + i];
          }
          break;
        }
        case kAdd: {
          const double* x = work.data() + size_t(ins.a) * kChunk;
          const double* y = work.data() + size_t(ins.b) * kChunk;
          for (size_t i = 0; i < m; ++i) dst[i] = x[i] + y[i];
          break;
        }
        case kSub: {
          const double* x = work.data() + size_t(ins.a) * kChunk;
          const double* y = work.data() + size_t(ins.b) * kChunk;
          for (size_t i = 0; i < m; ++i) dst[i] = x[i] - y[i];
          break;
        }
        case kMul: {
          const double* x = work.data() + size_t(ins.a) * kChunk;
          const double* y = work.data() + size_t(ins.b) * kChunk;
          for (size_t i = 0; i < m; ++i) dst[i] = x[i] * y[i];
          break;
        }
        case kDiv: {
          const double* x = work.data() + size_t(ins.a) * kChunk;
          const double* y = work.data() + size_t(ins.b) * kChunk;
          for (size_t i = 0; i < m; ++i) {
            if (y[i] == 0.0) throw DomainError("division by zero");
            dst[i] = x[i] / y[i];
          }
          break;
        }
        case kPow: {
          const double* x = work.data() + size_t(ins.a) * kChunk;
          const double* y = work.data() + size_t(ins.b) * kChunk;
          for (size_t i = 0; i < m; ++i) dst[i] = std::pow(x[i], y[i]);
          break;
        }
        default: {
          const double* x = work.data() + size_t(ins.a) * kChunk;
          switch (ins.op) {
            case kNeg: for (size_t i = 0; i < m; ++i) dst[i] = -x[i]; break;
            case kSin: for (size_t i = 0; i < m; ++i) dst[i] = std::sin(x[i]); break;
            case kCos: for (size_t i = 0; i < m; ++i) dst[i] = std::cos(x[i]); break;
            case kTan: for (size_t i = 0; i < m; ++i) dst[i] = std::tan(x[i]); break;
            case kCot:
              for (size_t i = 0; i < m; ++i) {
                double s = std::sin(x[i]);
                if (s == 0.0) throw DomainError("cot at a multiple of pi");
                dst[i] = std::cos(x[i]) / s;
              }
              break;
            case kSec:
              for (size_t i = 0; i < m; ++i) {
                double c = std::cos(x[i]);
                if (c == 0.0) throw DomainError("sec at an odd multiple of pi/2");
                dst[i] = 1.0 / c;
              }
              break;
            case kCsc:
              for (size_t i = 0; i < m; ++i) {
                double s = std::sin(x[i]);
                if (s == 0.0) throw DomainError("csc at a multiple of pi");
                dst[i] = 1.0 / s;
              }
              break;
            case kExp: for (size_t i = 0; i < m; ++i) dst[i] = std::exp(x[i]); break;
            case kLn:
              for (size_t i = 0; i < m; ++i) {
                if (x[i] <= 0.0) throw DomainError("ln of a non-positive value");
                dst[i] = std::log(x[i]);
              }
              break;
            case kSqrt:
              for (size_t i = 0; i < m; ++i) {
                if (x[i] < 0.0) throw DomainError("sqrt of a negative value");
                dst[i] = std::sqrt(x[i]);
              }
              break;
            case kSinh: for (size_t i = 0; i < m; ++i) dst[i] = std::sinh(x[i]); break;
            case kCosh: for (size_t i = 0; i < m; ++i) dst[i] = std::cosh(x[i]); break;
            default: throw std::logic_error("bad opcode");
          }
          break;
        }
      }
    }
    for (size_t k = 0; k < roots_.size(); ++k) {
      const double* src = work.data() + size_t(roots_[k]) * kChunk;
      for (size_t i = 0; i < m; ++i) {
        double v = src[i];
        if (!std::isfinite(v)) throw DomainError("non-finite value in batched evaluation");
        out[k][base + i] = v;
      }
    }
  }
}

double Tape::eval_one(const EvalPoint& p) const {
  Bindings b;
  b.n = 1;
  b.set(Var::u, p.u);
  b.set(Var::theta, p.theta);
  b.set(Var::psi, p.psi);
  b.set(Var::r, p.r);
  std::vector<double> vals(roots_.size());
  std::vector<std::span<double>> outs;
  outs.reserve(roots_.size());
  for (auto& v : vals) outs.push_back(std::span<double>(&v, 1));
  eval(b, outs);
  return vals.empty() ? 0.0 : vals[0];
}

}  // namespace bondi
