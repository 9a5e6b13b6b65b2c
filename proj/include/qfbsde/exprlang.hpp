#pragma once

// Small arithmetic expression language used to define coefficient maps in
// configuration files.
//
// Grammar (Pratt precedence, loosest first):
//   expr   := expr ('+'|'-') expr        left-assoc
//           | expr ('*'|'/') expr        left-assoc
//           | '-' expr                   prefix
//           | expr '^' expr              right-assoc, binds tighter than prefix '-'
//           | number | variable | func '(' args ')' | '(' expr ')'
// Variables: t, x<k>, y<k>, z<i>_<j>, p<k>, a<k>   (indices start at 1)
// Functions: sin cos exp log tanh sqrt abs (1 arg), min max (2), clamp (3)

#include "qfbsde/errors.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <system_error>
#include <unordered_map>
#include <utility>
#include <vector>

namespace qfbsde::expr {

enum class NodeKind { number, variable, negate, binary, call };
enum class BinaryOp { add, sub, mul, div, pow };
enum class Function { sin, cos, exp, log, tanh, sqrt, abs, min, max, clamp };

struct Node;
using NodePtr = std::shared_ptr<const Node>;

struct Node {
    NodeKind kind = NodeKind::number;
    double value = 0.0;          // number
    std::string name;            // variable
    BinaryOp op = BinaryOp::add; // binary
    Function fn = Function::sin; // call
    std::vector<NodePtr> args;   // negate: 1, binary: 2, call: arity
};

inline bool operator==(const Node& a, const Node& b) {
    if (a.kind != b.kind || a.args.size() != b.args.size()) return false;
    switch (a.kind) {
    case NodeKind::number:
        // Bitwise-equal literals (distinguishes 0 and -0).
        if (std::signbit(a.value) != std::signbit(b.value) || !(a.value == b.value)) return false;
        break;
    case NodeKind::variable:
        if (a.name != b.name) return false;
        break;
    case NodeKind::binary:
        if (a.op != b.op) return false;
        break;
    case NodeKind::call:
        if (a.fn != b.fn) return false;
        break;
    case NodeKind::negate:
        break;
    }
    for (std::size_t k = 0; k < a.args.size(); ++k)
        if (!(*a.args[k] == *b.args[k])) return false;
    return true;
}

// ---------------------------------------------------------------------------
// Errors

class ExprError : public Error {
public:
    ExprError(const std::string& what, std::size_t position) : Error(what), position_(position) {}
    std::size_t position() const noexcept { return position_; }

private:
    std::size_t position_;
};

class LexicalError : public ExprError {
public:
    LexicalError(std::size_t pos, char offending)
        : ExprError("lexical error at position " + std::to_string(pos) + ": unexpected character '" +
                        std::string(1, offending) + "'",
                    pos),
          offending_(offending) {}
    char offending() const noexcept { return offending_; }

private:
    char offending_;
};

class SyntaxError : public ExprError {
public:
    SyntaxError(std::size_t pos, std::vector<std::string> expected, const std::string& found)
        : ExprError(describe(pos, expected, found), pos), expected_(std::move(expected)) {}
    const std::vector<std::string>& expected() const noexcept { return expected_; }

private:
    static std::string describe(std::size_t pos, const std::vector<std::string>& expected,
                                const std::string& found) {
        std::string s = "syntax error at position " + std::to_string(pos) + ": expected ";
        for (std::size_t k = 0; k < expected.size(); ++k) s += (k ? " | " : "") + expected[k];
        return s + ", found " + found;
    }
    std::vector<std::string> expected_;
};

class ArityError : public ExprError {
public:
    ArityError(std::size_t pos, const std::string& fn, std::size_t expected, std::size_t got)
        : ExprError("arity error at position " + std::to_string(pos) + ": " + fn + " takes " +
                        std::to_string(expected) + " argument(s), got " + std::to_string(got),
                    pos) {}
};

class UnboundVariable : public ExprError {
public:
    explicit UnboundVariable(std::string name)
        : ExprError("unbound variable '" + name + "'", 0), name_(std::move(name)) {}
    const std::string& name() const noexcept { return name_; }

private:
    std::string name_;
};

class DomainError : public ExprError {
public:
    DomainError(const std::string& reason, std::string subexpression)
        : ExprError("domain error (" + reason + ") in " + subexpression, 0),
          subexpression_(std::move(subexpression)) {}
    const std::string& subexpression() const noexcept { return subexpression_; }

private:
    std::string subexpression_;
};

// ---------------------------------------------------------------------------
// Functions and variable names

struct FunctionInfo {
    std::string_view name;
    Function fn;
    std::size_t arity;
};

inline constexpr std::array<FunctionInfo, 10> kFunctions{{
    {"sin", Function::sin, 1},
    {"cos", Function::cos, 1},
    {"exp", Function::exp, 1},
    {"log", Function::log, 1},
    {"tanh", Function::tanh, 1},
    {"sqrt", Function::sqrt, 1},
    {"abs", Function::abs, 1},
    {"min", Function::min, 2},
    {"max", Function::max, 2},
    {"clamp", Function::clamp, 3},
}};

inline const FunctionInfo& function_info(Function fn) {
    for (const auto& info : kFunctions)
        if (info.fn == fn) return info;
    return kFunctions[0];
}

inline std::optional<FunctionInfo> lookup_function(std::string_view name) {
    for (const auto& info : kFunctions)
        if (info.name == name) return info;
    return std::nullopt;
}

namespace detail {

inline std::optional<std::size_t> parse_index(std::string_view digits) {
    if (digits.empty() || digits.front() == '0') return std::nullopt;
    std::size_t v = 0;
    auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), v);
    if (ec != std::errc{} || ptr != digits.data() + digits.size()) return std::nullopt;
    return v;
}

}  // namespace detail

/// Decoded variable name. `slot` is one of 't','x','y','z','p','a'.
struct VariableName {
    char slot = 't';
    std::size_t index = 0;   // 1-based; 0 for t
    std::size_t column = 0;  // 1-based z column; 0 otherwise
};

inline std::optional<VariableName> decode_variable(std::string_view name) {
    if (name == "t") return VariableName{'t', 0, 0};
    if (name.size() < 2) return std::nullopt;
    const char slot = name.front();
    const std::string_view rest = name.substr(1);
    if (slot == 'x' || slot == 'y' || slot == 'p' || slot == 'a') {
        auto idx = detail::parse_index(rest);
        if (!idx) return std::nullopt;
        return VariableName{slot, *idx, 0};
    }
    if (slot == 'z') {
        const auto us = rest.find('_');
        if (us == std::string_view::npos) return std::nullopt;
        auto row = detail::parse_index(rest.substr(0, us));
        auto col = detail::parse_index(rest.substr(us + 1));
        if (!row || !col) return std::nullopt;
        return VariableName{'z', *row, *col};
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Printing

inline std::string format_number(double v) {
    std::array<char, 64> buf{};
    auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    (void)ec;
    return std::string(buf.data(), ptr);
}

inline void print_node(const Node& node, std::string& out) {
    switch (node.kind) {
    case NodeKind::number:
        if (std::signbit(node.value)) {
            out += "(-";
            out += format_number(-node.value);
            out += ")";
        } else {
            out += format_number(node.value);
        }
        return;
    case NodeKind::variable:
        out += node.name;
        return;
    case NodeKind::negate:
        out += "(-";
        print_node(*node.args[0], out);
        out += ")";
        return;
    case NodeKind::binary: {
        static constexpr std::array<std::string_view, 5> sym{" + ", " - ", " * ", " / ", " ^ "};
        out += "(";
        print_node(*node.args[0], out);
        out += sym[static_cast<std::size_t>(node.op)];
        print_node(*node.args[1], out);
        out += ")";
        return;
    }
    case NodeKind::call:
        out += function_info(node.fn).name;
        out += "(";
        for (std::size_t k = 0; k < node.args.size(); ++k) {
            if (k) out += ", ";
            print_node(*node.args[k], out);
        }
        out += ")";
        return;
    }
}

/// Fully parenthesised rendering; reparsing it yields an identical tree.
inline std::string print(const Node& node) {
    std::string out;
    print_node(node, out);
    return out;
}

// ---------------------------------------------------------------------------
// Compiled form: postfix program over a flat environment.

namespace detail {

enum class OpCode : unsigned char {
    literal, load, negate, add, sub, mul, div, pow,
    sin, cos, exp, log, tanh, sqrt, abs, min, max, clamp
};

struct Instr {
    OpCode code;
    std::size_t slot = 0;
    double literal = 0.0;
    const Node* origin = nullptr;
};

inline OpCode opcode_for(Function fn) {
    switch (fn) {
    case Function::sin: return OpCode::sin;
    case Function::cos: return OpCode::cos;
    case Function::exp: return OpCode::exp;
    case Function::log: return OpCode::log;
    case Function::tanh: return OpCode::tanh;
    case Function::sqrt: return OpCode::sqrt;
    case Function::abs: return OpCode::abs;
    case Function::min: return OpCode::min;
    case Function::max: return OpCode::max;
    case Function::clamp: return OpCode::clamp;
    }
    return OpCode::sin;
}

inline OpCode opcode_for(BinaryOp op) {
    switch (op) {
    case BinaryOp::add: return OpCode::add;
    case BinaryOp::sub: return OpCode::sub;
    case BinaryOp::mul: return OpCode::mul;
    case BinaryOp::div: return OpCode::div;
    case BinaryOp::pow: return OpCode::pow;
    }
    return OpCode::add;
}

struct Program {
    std::vector<Instr> code;
    std::size_t max_depth = 0;
};

template <typename SlotOf>
void emit(const Node& node, Program& prog, std::size_t& depth, SlotOf&& slot_of) {
    auto push = [&](Instr ins) {
        prog.code.push_back(ins);
        ++depth;
        prog.max_depth = std::max(prog.max_depth, depth);
    };
    switch (node.kind) {
    case NodeKind::number:
        push({OpCode::literal, 0, node.value, &node});
        return;
    case NodeKind::variable:
        push({OpCode::load, slot_of(node.name), 0.0, &node});
        return;
    case NodeKind::negate:
        emit(*node.args[0], prog, depth, slot_of);
        prog.code.push_back({OpCode::negate, 0, 0.0, &node});
        return;
    case NodeKind::binary:
        emit(*node.args[0], prog, depth, slot_of);
        emit(*node.args[1], prog, depth, slot_of);
        prog.code.push_back({opcode_for(node.op), 0, 0.0, &node});
        --depth;
        return;
    case NodeKind::call:
        for (const auto& arg : node.args) emit(*arg, prog, depth, slot_of);
        prog.code.push_back({opcode_for(node.fn), 0, 0.0, &node});
        depth -= node.args.size() - 1;
        return;
    }
}

[[noreturn]] inline void domain_fail(const char* reason, const Node* origin) {
    throw DomainError(reason, origin ? print(*origin) : std::string("<expr>"));
}

inline double run(const Program& prog, std::span<const double> env, std::span<const std::size_t> remap) {
    std::array<double, 48> small{};
    std::vector<double> large;
    double* stack = small.data();
    if (prog.max_depth > small.size()) {
        large.resize(prog.max_depth);
        stack = large.data();
    }
    std::size_t sp = 0;
    for (const Instr& ins : prog.code) {
        switch (ins.code) {
        case OpCode::literal: stack[sp++] = ins.literal; break;
        case OpCode::load: stack[sp++] = env[remap.empty() ? ins.slot : remap[ins.slot]]; break;
        case OpCode::negate: stack[sp - 1] = -stack[sp - 1]; break;
        case OpCode::add: --sp; stack[sp - 1] = stack[sp - 1] + stack[sp]; break;
        case OpCode::sub: --sp; stack[sp - 1] = stack[sp - 1] - stack[sp]; break;
        case OpCode::mul: --sp; stack[sp - 1] = stack[sp - 1] * stack[sp]; break;
        case OpCode::div:
            --sp;
            if (stack[sp] == 0.0) domain_fail("division by zero", ins.origin);
            stack[sp - 1] = stack[sp - 1] / stack[sp];
            break;
        case OpCode::pow: {
            --sp;
            const double base = stack[sp - 1], ex = stack[sp];
            const double r = std::pow(base, ex);
            if (std::isfinite(base) && std::isfinite(ex) && !std::isfinite(r) && !(std::isinf(r) && base != 0.0))
                domain_fail("power undefined", ins.origin);
            stack[sp - 1] = r;
            break;
        }
        case OpCode::sin: stack[sp - 1] = std::sin(stack[sp - 1]); break;
        case OpCode::cos: stack[sp - 1] = std::cos(stack[sp - 1]); break;
        case OpCode::exp: stack[sp - 1] = std::exp(stack[sp - 1]); break;
        case OpCode::log:
            if (!(stack[sp - 1] > 0.0)) domain_fail("log of non-positive value", ins.origin);
            stack[sp - 1] = std::log(stack[sp - 1]);
            break;
        case OpCode::tanh: stack[sp - 1] = std::tanh(stack[sp - 1]); break;
        case OpCode::sqrt:
            if (stack[sp - 1] < 0.0) domain_fail("sqrt of negative value", ins.origin);
            stack[sp - 1] = std::sqrt(stack[sp - 1]);
            break;
        case OpCode::abs: stack[sp - 1] = std::fabs(stack[sp - 1]); break;
        case OpCode::min: --sp; stack[sp - 1] = std::fmin(stack[sp - 1], stack[sp]); break;
        case OpCode::max: --sp; stack[sp - 1] = std::fmax(stack[sp - 1], stack[sp]); break;
        case OpCode::clamp:
            sp -= 2;
            stack[sp - 1] = std::fmin(std::fmax(stack[sp - 1], stack[sp]), stack[sp + 1]);
            break;
        }
    }
    return stack[0];
}

inline void collect_vars(const Node& node, std::set<std::string>& out) {
    if (node.kind == NodeKind::variable) out.insert(node.name);
    for (const auto& a : node.args) collect_vars(*a, out);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Expr

using Bindings = std::map<std::string, double, std::less<>>;

/// Immutable parsed expression. Variables are indexed in sorted order.
class Expr {
public:
    Expr() : Expr(std::make_shared<Node>()) {}

    explicit Expr(NodePtr root) : root_(std::move(root)) {
        std::set<std::string> names;
        detail::collect_vars(*root_, names);
        vars_.assign(names.begin(), names.end());
        std::size_t depth = 0;
        detail::emit(*root_, program_, depth, [this](const std::string& n) { return index_of(n); });
    }

    const Node& root() const noexcept { return *root_; }
    const NodePtr& root_ptr() const noexcept { return root_; }

    /// Distinct free variables, sorted.
    const std::vector<std::string>& variables() const noexcept { return vars_; }

    /// Evaluate with values aligned to variables().
    double evaluate(std::span<const double> values) const { return detail::run(program_, values, {}); }

    const detail::Program& program() const noexcept { return program_; }

    std::string to_string() const { return print(*root_); }

    friend bool operator==(const Expr& a, const Expr& b) { return *a.root_ == *b.root_; }

private:
    std::size_t index_of(const std::string& name) const {
        return static_cast<std::size_t>(std::lower_bound(vars_.begin(), vars_.end(), name) - vars_.begin());
    }

    NodePtr root_;
    std::vector<std::string> vars_;
    detail::Program program_;
};

inline std::set<std::string> free_vars(const Expr& e) {
    return {e.variables().begin(), e.variables().end()};
}

inline double eval_expr(const Expr& e, const Bindings& bindings) {
    std::vector<double> values;
    values.reserve(e.variables().size());
    for (const auto& name : e.variables()) {
        auto it = bindings.find(name);
        if (it == bindings.end()) throw UnboundVariable(name);
        values.push_back(it->second);
    }
    return e.evaluate(values);
}

/// An expression bound to a fixed variable layout, evaluated from a flat
/// environment vector. This is the form used in numerical hot loops.
class BoundExpr {
public:
    BoundExpr() = default;

    BoundExpr(Expr e, std::span<const std::string> layout) : expr_(std::move(e)) {
        remap_.reserve(expr_.variables().size());
        for (const auto& name : expr_.variables()) {
            auto it = std::find(layout.begin(), layout.end(), name);
            if (it == layout.end()) throw UnboundVariable(name);
            remap_.push_back(static_cast<std::size_t>(it - layout.begin()));
        }
    }

    double operator()(std::span<const double> env) const {
        return detail::run(expr_.program(), env, remap_);
    }

    const Expr& expr() const noexcept { return expr_; }

private:
    Expr expr_;
    std::vector<std::size_t> remap_;
};

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

enum class TokKind { number, ident, plus, minus, star, slash, caret, lparen, rparen, comma, end };

struct Token {
    TokKind kind;
    std::size_t pos;
    std::string text;
    double number = 0.0;
};

inline std::string describe(const Token& tok) {
    if (tok.kind == TokKind::end) return "end of input";
    return "'" + tok.text + "'";
}

inline std::vector<Token> lex(std::string_view src) {
    std::vector<Token> out;
    std::size_t i = 0;
    auto is_digit = [](char c) { return c >= '0' && c <= '9'; };
    auto is_alpha = [](char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_'; };
    while (i < src.size()) {
        const char c = src[i];
        if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
            ++i;
            continue;
        }
        if (is_digit(c) || (c == '.' && i + 1 < src.size() && is_digit(src[i + 1]))) {
            const std::size_t start = i;
            while (i < src.size() && is_digit(src[i])) ++i;
            if (i < src.size() && src[i] == '.') {
                ++i;
                while (i < src.size() && is_digit(src[i])) ++i;
            }
            if (i < src.size() && (src[i] == 'e' || src[i] == 'E')) {
                std::size_t j = i + 1;
                if (j < src.size() && (src[j] == '+' || src[j] == '-')) ++j;
                if (j < src.size() && is_digit(src[j])) {
                    i = j;
                    while (i < src.size() && is_digit(src[i])) ++i;
                } else {
                    throw LexicalError(j < src.size() ? j : i, j < src.size() ? src[j] : src[i]);
                }
            }
            Token tok{TokKind::number, start, std::string(src.substr(start, i - start))};
            auto [ptr, ec] = std::from_chars(tok.text.data(), tok.text.data() + tok.text.size(), tok.number);
            if (ec != std::errc{} || ptr != tok.text.data() + tok.text.size())
                throw LexicalError(start, c);
            out.push_back(std::move(tok));
            continue;
        }
        if (is_alpha(c)) {
            const std::size_t start = i;
            while (i < src.size() && (is_alpha(src[i]) || is_digit(src[i]))) ++i;
            out.push_back({TokKind::ident, start, std::string(src.substr(start, i - start))});
            continue;
        }
        TokKind k;
        switch (c) {
        case '+': k = TokKind::plus; break;
        case '-': k = TokKind::minus; break;
        case '*': k = TokKind::star; break;
        case '/': k = TokKind::slash; break;
        case '^': k = TokKind::caret; break;
        case '(': k = TokKind::lparen; break;
        case ')': k = TokKind::rparen; break;
        case ',': k = TokKind::comma; break;
        default: throw LexicalError(i, c);
        }
        out.push_back({k, i, std::string(1, c)});
        ++i;
    }
    out.push_back({TokKind::end, src.size(), ""});
    return out;
}

// Binding powers.
inline constexpr int kAdditive = 10;
inline constexpr int kMultiplicative = 20;
inline constexpr int kPrefix = 30;
inline constexpr int kPower = 40;

class Parser {
public:
    explicit Parser(std::string_view src) : toks_(lex(src)) {}

    NodePtr parse() {
        NodePtr e = expression(0);
        if (peek().kind != TokKind::end)
            throw SyntaxError(peek().pos, {"operator", "end of input"}, describe(peek()));
        return e;
    }

private:
    const Token& peek() const { return toks_[pos_]; }
    const Token& next() { return toks_[pos_++]; }

    static std::optional<std::pair<BinaryOp, int>> infix(TokKind k) {
        switch (k) {
        case TokKind::plus: return std::pair{BinaryOp::add, kAdditive};
        case TokKind::minus: return std::pair{BinaryOp::sub, kAdditive};
        case TokKind::star: return std::pair{BinaryOp::mul, kMultiplicative};
        case TokKind::slash: return std::pair{BinaryOp::div, kMultiplicative};
        case TokKind::caret: return std::pair{BinaryOp::pow, kPower};
        default: return std::nullopt;
        }
    }

    NodePtr expression(int min_bp) {
        NodePtr lhs = prefix();
        for (;;) {
            auto op = infix(peek().kind);
            if (!op || op->second <= min_bp) break;
            next();
            // '^' is right-associative: its right operand may contain another '^'.
            const int rbp = op->first == BinaryOp::pow ? op->second - 1 : op->second;
            NodePtr rhs = expression(rbp);
            auto node = std::make_shared<Node>();
            node->kind = NodeKind::binary;
            node->op = op->first;
            node->args = {std::move(lhs), std::move(rhs)};
            lhs = std::move(node);
        }
        return lhs;
    }

    NodePtr prefix() {
        const Token& tok = next();
        switch (tok.kind) {
        case TokKind::number: {
            auto node = std::make_shared<Node>();
            node->kind = NodeKind::number;
            node->value = tok.number;
            return node;
        }
        case TokKind::minus: {
            auto node = std::make_shared<Node>();
            node->kind = NodeKind::negate;
            node->args = {expression(kPrefix)};
            return node;
        }
        case TokKind::lparen: {
            NodePtr inner = expression(0);
            expect(TokKind::rparen, "')'");
            return inner;
        }
        case TokKind::ident: return identifier(tok);
        default:
            throw SyntaxError(tok.pos, {"number", "identifier", "'('", "'-'"}, describe(tok));
        }
    }

    NodePtr identifier(const Token& tok) {
        if (auto fn = lookup_function(tok.text)) {
            expect(TokKind::lparen, "'('");
            std::vector<NodePtr> args;
            if (peek().kind != TokKind::rparen) {
                args.push_back(expression(0));
                while (peek().kind == TokKind::comma) {
                    next();
                    args.push_back(expression(0));
                }
            }
            expect(TokKind::rparen, "')' or ','");
            if (args.size() != fn->arity) throw ArityError(tok.pos, std::string(fn->name), fn->arity, args.size());
            auto node = std::make_shared<Node>();
            node->kind = NodeKind::call;
            node->fn = fn->fn;
            node->args = std::move(args);
            return node;
        }
        if (!decode_variable(tok.text))
            throw SyntaxError(tok.pos, {"variable (t, xK, yK, zI_J, pK, aK)", "function name"}, describe(tok));
        if (peek().kind == TokKind::lparen)
            throw SyntaxError(peek().pos, {"operator", "end of input"}, describe(peek()));
        auto node = std::make_shared<Node>();
        node->kind = NodeKind::variable;
        node->name = tok.text;
        return node;
    }

    void expect(TokKind kind, const char* what) {
        if (peek().kind != kind) throw SyntaxError(peek().pos, {what}, describe(peek()));
        next();
    }

    std::vector<Token> toks_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline Expr parse_expr(std::string_view source) { return Expr(detail::Parser(source).parse()); }

// ---------------------------------------------------------------------------
// Tree builders (used by tests and programmatic model construction)

inline NodePtr number(double v) {
    auto n = std::make_shared<Node>();
    n->kind = NodeKind::number;
    n->value = v;
    return n;
}

inline NodePtr variable(std::string name) {
    auto n = std::make_shared<Node>();
    n->kind = NodeKind::variable;
    n->name = std::move(name);
    return n;
}

inline NodePtr negate(NodePtr a) {
    auto n = std::make_shared<Node>();
    n->kind = NodeKind::negate;
    n->args = {std::move(a)};
    return n;
}

inline NodePtr binary(BinaryOp op, NodePtr a, NodePtr b) {
    auto n = std::make_shared<Node>();
    n->kind = NodeKind::binary;
    n->op = op;
    n->args = {std::move(a), std::move(b)};
    return n;
}

inline NodePtr call(Function fn, std::vector<NodePtr> args) {
    auto n = std::make_shared<Node>();
    n->kind = NodeKind::call;
    n->fn = fn;
    n->args = std::move(args);
    return n;
}

}  // namespace qfbsde::expr
