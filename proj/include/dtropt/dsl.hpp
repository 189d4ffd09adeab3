#pragma once

#include <cctype>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "dtropt/errors.hpp"
#include "dtropt/tabular.hpp"

namespace dtropt {

// ---------------------------------------------------------------------------
// Arithmetic expressions and decision rules
// ---------------------------------------------------------------------------

enum class CmpOp { Eq, Gt, Lt, Ge, Le };

inline const char* cmp_text(CmpOp op) {
    switch (op) {
        case CmpOp::Eq: return "==";
        case CmpOp::Gt: return ">";
        case CmpOp::Lt: return "<";
        case CmpOp::Ge: return ">=";
        case CmpOp::Le: return "<=";
    }
    return "?";
}

struct ExprNode;
using ExprPtr = std::shared_ptr<const ExprNode>;

struct ExprNode {
    enum class Kind { Constant, Identifier, Add, Sub, Mul, Div } kind;
    double value = 0.0;     // Constant
    std::string name;       // Identifier
    ExprPtr left, right;    // binary ops
};

/// Name -> value binding used when evaluating expressions. Identifiers are
/// looked up first among covariates, then among psi coordinates.
struct Bindings {
    const std::unordered_map<std::string, double>* covariates = nullptr;
    const std::unordered_map<std::string, double>* psi = nullptr;

    double lookup(const std::string& name) const {
        if (covariates) {
            auto it = covariates->find(name);
            if (it != covariates->end()) return it->second;
        }
        if (psi) {
            auto it = psi->find(name);
            if (it != psi->end()) return it->second;
        }
        throw EvalError("unbound identifier: " + name);
    }
};

inline double eval_expr(const ExprNode& node, const Bindings& b) {
    switch (node.kind) {
        case ExprNode::Kind::Constant: return node.value;
        case ExprNode::Kind::Identifier: return b.lookup(node.name);
        case ExprNode::Kind::Add: return eval_expr(*node.left, b) + eval_expr(*node.right, b);
        case ExprNode::Kind::Sub: return eval_expr(*node.left, b) - eval_expr(*node.right, b);
        case ExprNode::Kind::Mul: return eval_expr(*node.left, b) * eval_expr(*node.right, b);
        case ExprNode::Kind::Div: {
            double denom = eval_expr(*node.right, b);
            if (denom == 0.0) throw EvalError("division by zero in rule expression");
            return eval_expr(*node.left, b) / denom;
        }
    }
    throw EvalError("corrupt expression node");
}

inline void collect_identifiers(const ExprNode& node, std::vector<std::string>& out) {
    switch (node.kind) {
        case ExprNode::Kind::Constant: return;
        case ExprNode::Kind::Identifier: out.push_back(node.name); return;
        default:
            collect_identifiers(*node.left, out);
            collect_identifiers(*node.right, out);
    }
}

inline void print_expr(const ExprNode& node, std::ostream& os) {
    switch (node.kind) {
        case ExprNode::Kind::Constant: os << node.value; return;
        case ExprNode::Kind::Identifier: os << node.name; return;
        case ExprNode::Kind::Add:
        case ExprNode::Kind::Sub: {
            os << '(';
            print_expr(*node.left, os);
            os << (node.kind == ExprNode::Kind::Add ? "+" : "-");
            print_expr(*node.right, os);
            os << ')';
            return;
        }
        case ExprNode::Kind::Mul:
        case ExprNode::Kind::Div: {
            os << '(';
            print_expr(*node.left, os);
            os << (node.kind == ExprNode::Kind::Mul ? "*" : "/");
            print_expr(*node.right, os);
            os << ')';
            return;
        }
    }
}

/// One stage decision rule: `arith cmp arith`. Evaluates to {0,1}.
struct RuleExpr {
    ExprPtr lhs;
    CmpOp op = CmpOp::Gt;
    ExprPtr rhs;
    std::string source;  // original text, kept for reports

    std::vector<std::string> identifiers() const {
        std::vector<std::string> out;
        collect_identifiers(*lhs, out);
        collect_identifiers(*rhs, out);
        return out;
    }

    std::string pretty() const {
        std::ostringstream os;
        print_expr(*lhs, os);
        os << cmp_text(op);
        print_expr(*rhs, os);
        return os.str();
    }
};

namespace detail {

struct Token {
    enum class Kind { Number, Ident, Plus, Minus, Star, Slash, LParen, RParen, Cmp, End } kind;
    double number = 0.0;
    std::string text;
    CmpOp cmp = CmpOp::Gt;
    std::size_t offset = 0;
};

class RuleLexer {
public:
    explicit RuleLexer(const std::string& text) : text_(text) {}

    Token next() {
        while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
        std::size_t start = pos_;
        if (pos_ >= text_.size()) return {Token::Kind::End, 0, "", CmpOp::Gt, start};
        char c = text_[pos_];
        if (std::isdigit(static_cast<unsigned char>(c)) ||
            (c == '.' && pos_ + 1 < text_.size() &&
             std::isdigit(static_cast<unsigned char>(text_[pos_ + 1])))) {
            std::size_t end = pos_;
            while (end < text_.size() &&
                   (std::isdigit(static_cast<unsigned char>(text_[end])) || text_[end] == '.'))
                ++end;
            // optional exponent
            if (end < text_.size() && (text_[end] == 'e' || text_[end] == 'E')) {
                std::size_t e = end + 1;
                if (e < text_.size() && (text_[e] == '+' || text_[e] == '-')) ++e;
                if (e < text_.size() && std::isdigit(static_cast<unsigned char>(text_[e]))) {
                    while (e < text_.size() && std::isdigit(static_cast<unsigned char>(text_[e])))
                        ++e;
                    end = e;
                }
            }
            std::string num = text_.substr(pos_, end - pos_);
            pos_ = end;
            try {
                return {Token::Kind::Number, std::stod(num), num, CmpOp::Gt, start};
            } catch (...) {
                throw ParseError("malformed number '" + num + "'", start);
            }
        }
        if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
            std::size_t end = pos_;
            while (end < text_.size() &&
                   (std::isalnum(static_cast<unsigned char>(text_[end])) || text_[end] == '_' ||
                    text_[end] == '.'))
                ++end;
            std::string name = text_.substr(pos_, end - pos_);
            pos_ = end;
            return {Token::Kind::Ident, 0, name, CmpOp::Gt, start};
        }
        switch (c) {
            case '+': ++pos_; return {Token::Kind::Plus, 0, "+", CmpOp::Gt, start};
            case '-': ++pos_; return {Token::Kind::Minus, 0, "-", CmpOp::Gt, start};
            case '*': ++pos_; return {Token::Kind::Star, 0, "*", CmpOp::Gt, start};
            case '/': ++pos_; return {Token::Kind::Slash, 0, "/", CmpOp::Gt, start};
            case '(': ++pos_; return {Token::Kind::LParen, 0, "(", CmpOp::Gt, start};
            case ')': ++pos_; return {Token::Kind::RParen, 0, ")", CmpOp::Gt, start};
            case '=':
                if (pos_ + 1 < text_.size() && text_[pos_ + 1] == '=') {
                    pos_ += 2;
                    return {Token::Kind::Cmp, 0, "==", CmpOp::Eq, start};
                }
                throw ParseError("illegal token '='", start);
            case '>':
                if (pos_ + 1 < text_.size() && text_[pos_ + 1] == '=') {
                    pos_ += 2;
                    return {Token::Kind::Cmp, 0, ">=", CmpOp::Ge, start};
                }
                if (pos_ + 1 < text_.size() && text_[pos_ + 1] == '>')
                    throw ParseError("illegal token '>>'", start);
                ++pos_;
                return {Token::Kind::Cmp, 0, ">", CmpOp::Gt, start};
            case '<':
                if (pos_ + 1 < text_.size() && text_[pos_ + 1] == '=') {
                    pos_ += 2;
                    return {Token::Kind::Cmp, 0, "<=", CmpOp::Le, start};
                }
                if (pos_ + 1 < text_.size() && text_[pos_ + 1] == '<')
                    throw ParseError("illegal token '<<'", start);
                ++pos_;
                return {Token::Kind::Cmp, 0, "<", CmpOp::Lt, start};
            default:
                throw ParseError(std::string("illegal token '") + c + "'", start);
        }
    }

private:
    const std::string& text_;
    std::size_t pos_ = 0;
};

class RuleParser {
public:
    explicit RuleParser(const std::string& text) : lexer_(text) { advance(); }

    RuleExpr parse() {
        RuleExpr rule;
        rule.lhs = parse_arith();
        if (tok_.kind != Token::Kind::Cmp)
            throw ParseError("expected a comparison operator", tok_.offset);
        rule.op = tok_.cmp;
        advance();
        rule.rhs = parse_arith();
        if (tok_.kind == Token::Kind::Cmp)
            throw ParseError("more than one comparison operator", tok_.offset);
        if (tok_.kind != Token::Kind::End)
            throw ParseError("unexpected trailing input '" + tok_.text + "'", tok_.offset);
        return rule;
    }

private:
    void advance() { tok_ = lexer_.next(); }

    ExprPtr parse_arith() {
        ExprPtr node = parse_term();
        while (tok_.kind == Token::Kind::Plus || tok_.kind == Token::Kind::Minus) {
            auto kind = tok_.kind == Token::Kind::Plus ? ExprNode::Kind::Add : ExprNode::Kind::Sub;
            advance();
            ExprPtr rhs = parse_term();
            auto parent = std::make_shared<ExprNode>();
            parent->kind = kind;
            parent->left = node;
            parent->right = rhs;
            node = parent;
        }
        return node;
    }

    ExprPtr parse_term() {
        ExprPtr node = parse_factor();
        while (tok_.kind == Token::Kind::Star || tok_.kind == Token::Kind::Slash) {
            auto kind = tok_.kind == Token::Kind::Star ? ExprNode::Kind::Mul : ExprNode::Kind::Div;
            advance();
            ExprPtr rhs = parse_factor();
            auto parent = std::make_shared<ExprNode>();
            parent->kind = kind;
            parent->left = node;
            parent->right = rhs;
            node = parent;
        }
        return node;
    }

    ExprPtr parse_factor() {
        if (tok_.kind == Token::Kind::Minus) {
            // unary minus desugars to 0 - factor
            std::size_t off = tok_.offset;
            advance();
            auto zero = std::make_shared<ExprNode>();
            zero->kind = ExprNode::Kind::Constant;
            zero->value = 0.0;
            auto node = std::make_shared<ExprNode>();
            node->kind = ExprNode::Kind::Sub;
            node->left = zero;
            node->right = parse_factor();
            (void)off;
            return node;
        }
        if (tok_.kind == Token::Kind::Number) {
            auto node = std::make_shared<ExprNode>();
            node->kind = ExprNode::Kind::Constant;
            node->value = tok_.number;
            advance();
            return node;
        }
        if (tok_.kind == Token::Kind::Ident) {
            auto node = std::make_shared<ExprNode>();
            node->kind = ExprNode::Kind::Identifier;
            node->name = tok_.text;
            advance();
            return node;
        }
        if (tok_.kind == Token::Kind::LParen) {
            advance();
            ExprPtr inner = parse_arith();
            if (tok_.kind != Token::Kind::RParen)
                throw ParseError("unbalanced parentheses", tok_.offset);
            advance();
            return inner;
        }
        throw ParseError("expected number, identifier, or '('", tok_.offset);
    }

    RuleLexer lexer_;
    Token tok_;
};

}  // namespace detail

/// Parses a stage decision rule such as "cd4.0>=psi1" or "psi1*x1+psi2*x2>0".
inline RuleExpr parse_rule(const std::string& text) {
    if (text.empty()) throw ParseError("empty rule", 0);
    RuleExpr rule = detail::RuleParser(text).parse();
    rule.source = text;
    return rule;
}

/// Evaluates a rule to {0,1}; == is exact double equality.
inline int eval_rule(const RuleExpr& rule,
                     const std::unordered_map<std::string, double>& covariates,
                     const std::unordered_map<std::string, double>& psi) {
    Bindings b{&covariates, &psi};
    double l = eval_expr(*rule.lhs, b);
    double r = eval_expr(*rule.rhs, b);
    switch (rule.op) {
        case CmpOp::Eq: return l == r;
        case CmpOp::Gt: return l > r;
        case CmpOp::Lt: return l < r;
        case CmpOp::Ge: return l >= r;
        case CmpOp::Le: return l <= r;
    }
    return 0;
}

/// K parsed decision rules plus the index coordinates and their box domain.
struct RegimeFamily {
    std::vector<RuleExpr> rules;            // rule k applies at stage k (0-based)
    std::vector<std::string> psi_names;     // ordered psi coordinate names
    std::vector<std::pair<double, double>> domain;  // per-coordinate [lo, hi]

    std::size_t stages() const { return rules.size(); }
    std::size_t dim() const { return psi_names.size(); }

    std::unordered_map<std::string, double> psi_map(const std::vector<double>& psi) const {
        if (psi.size() != psi_names.size())
            throw EvalError("psi point dimension mismatch");
        std::unordered_map<std::string, double> m;
        for (std::size_t d = 0; d < psi.size(); ++d) m[psi_names[d]] = psi[d];
        return m;
    }

    void validate_against(const Dataset& data) const {
        if (rules.empty()) throw ConfigError("regime family has no rules");
        if (domain.size() != psi_names.size())
            throw ConfigError("psi domain dimension does not match psi names");
        for (const auto& [lo, hi] : domain)
            if (!(lo <= hi)) throw ConfigError("empty psi domain interval");
        for (const auto& rule : rules) {
            for (const auto& id : rule.identifiers()) {
                bool is_psi =
                    std::find(psi_names.begin(), psi_names.end(), id) != psi_names.end();
                if (!is_psi && !data.has_column(id))
                    throw ConfigError("rule identifier '" + id +
                                      "' is neither a psi coordinate nor a dataset column");
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Model formulas and design matrices
// ---------------------------------------------------------------------------

/// Reserved response name used by the DR recursion for stages before the last.
inline const std::string kPseudoOutcome = "Pseudo_Outcome";

struct FormulaTerm {
    enum class Kind { Main, Interaction, Square } kind;
    std::string a;
    std::string b;  // Interaction only

    std::string text() const {
        switch (kind) {
            case Kind::Main: return a;
            case Kind::Interaction: return a + ":" + b;
            case Kind::Square: return "I(" + a + "^2)";
        }
        return "";
    }
    bool operator==(const FormulaTerm& o) const {
        return kind == o.kind && a == o.a && b == o.b;
    }
};

/// Parsed regression formula: response ~ terms. The intercept is always
/// implicit; an explicit "1" token is accepted and redundant.
struct ModelFormula {
    std::string response;
    std::vector<FormulaTerm> terms;
    std::string source;

    /// All variable names referenced by the right-hand side.
    std::vector<std::string> variables() const {
        std::vector<std::string> out;
        auto add = [&out](const std::string& v) {
            if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
        };
        for (const auto& t : terms) {
            add(t.a);
            if (t.kind == FormulaTerm::Kind::Interaction) add(t.b);
        }
        return out;
    }

    bool references(const std::string& var) const {
        for (const auto& t : terms)
            if (t.a == var || (t.kind == FormulaTerm::Kind::Interaction && t.b == var))
                return true;
        return false;
    }
};

namespace detail {

inline std::string strip(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

inline bool valid_name(const std::string& s) {
    if (s.empty()) return false;
    if (!std::isalpha(static_cast<unsigned char>(s[0])) && s[0] != '_') return false;
    for (char c : s)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '.') return false;
    return true;
}

}  // namespace detail

/// Parses "response~a+b:c+I(d^2)". Supported constructs: intercept "1", main
/// effects, ':' interactions, and I(v^2) squares. Anything else (notably '*')
/// is rejected.
inline ModelFormula parse_formula(const std::string& text) {
    auto tilde = text.find('~');
    if (tilde == std::string::npos) throw ParseError("formula must contain '~'", 0);
    if (text.find('~', tilde + 1) != std::string::npos)
        throw ParseError("formula must contain exactly one '~'", text.find('~', tilde + 1));
    ModelFormula f;
    f.source = text;
    f.response = detail::strip(text.substr(0, tilde));
    if (!detail::valid_name(f.response))
        throw ParseError("invalid response name '" + f.response + "'", 0);
    std::string rhs = text.substr(tilde + 1);
    std::size_t pos = 0;
    while (pos <= rhs.size()) {
        std::size_t next = rhs.find('+', pos);
        std::string raw = next == std::string::npos ? rhs.substr(pos) : rhs.substr(pos, next - pos);
        std::string term = detail::strip(raw);
        std::size_t term_off = tilde + 1 + pos;
        if (term.empty())
            throw ParseError("empty term in formula", term_off);
        if (term != "1") {
            FormulaTerm t;
            if (term.size() > 2 && term.substr(0, 2) == "I(" && term.back() == ')') {
                std::string inner = term.substr(2, term.size() - 3);
                auto caret = inner.find('^');
                if (caret == std::string::npos || detail::strip(inner.substr(caret + 1)) != "2")
                    throw ParseError("only I(name^2) is supported", term_off);
                t.kind = FormulaTerm::Kind::Square;
                t.a = detail::strip(inner.substr(0, caret));
                if (!detail::valid_name(t.a))
                    throw ParseError("invalid variable in I(^2) term", term_off);
            } else if (term.find(':') != std::string::npos) {
                auto colon = term.find(':');
                t.kind = FormulaTerm::Kind::Interaction;
                t.a = detail::strip(term.substr(0, colon));
                t.b = detail::strip(term.substr(colon + 1));
                if (!detail::valid_name(t.a) || !detail::valid_name(t.b) ||
                    t.b.find(':') != std::string::npos)
                    throw ParseError("invalid interaction term '" + term + "'", term_off);
            } else {
                t.kind = FormulaTerm::Kind::Main;
                t.a = term;
                if (!detail::valid_name(t.a))
                    throw ParseError("unsupported construct '" + term + "'", term_off);
            }
            for (const auto& existing : f.terms)
                if (existing == t)
                    throw ParseError("duplicate term '" + term + "'", term_off);
            f.terms.push_back(t);
        }
        if (next == std::string::npos) break;
        pos = next + 1;
    }
    return f;
}

/// Row accessor used for design matrices: (variable name, row index) -> value.
using RowGetter = std::function<double(const std::string&, std::size_t)>;

inline RowGetter dataset_rows(const Dataset& data) {
    return [&data](const std::string& name, std::size_t i) { return data.value(name, i); };
}

/// Builds the design matrix (intercept first, then term columns in order) and
/// the response vector.
inline std::pair<Eigen::MatrixXd, Eigen::VectorXd> design_matrix(const ModelFormula& formula,
                                                                 const RowGetter& rows,
                                                                 std::size_t n,
                                                                 bool with_response = true) {
    Eigen::MatrixXd X(n, formula.terms.size() + 1);
    X.col(0).setOnes();
    for (std::size_t j = 0; j < formula.terms.size(); ++j) {
        const auto& t = formula.terms[j];
        for (std::size_t i = 0; i < n; ++i) {
            double v;
            switch (t.kind) {
                case FormulaTerm::Kind::Main: v = rows(t.a, i); break;
                case FormulaTerm::Kind::Interaction: v = rows(t.a, i) * rows(t.b, i); break;
                case FormulaTerm::Kind::Square: {
                    double x = rows(t.a, i);
                    v = x * x;
                    break;
                }
                default: v = 0.0;
            }
            X(i, j + 1) = v;
        }
    }
    Eigen::VectorXd y;
    if (with_response) {
        y.resize(n);
        for (std::size_t i = 0; i < n; ++i) y(i) = rows(formula.response, i);
    }
    return {std::move(X), std::move(y)};
}

inline std::pair<Eigen::MatrixXd, Eigen::VectorXd> design_matrix(const ModelFormula& formula,
                                                                 const Dataset& data) {
    return design_matrix(formula, dataset_rows(data), data.n());
}

}  // namespace dtropt
