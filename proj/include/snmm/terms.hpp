#pragma once

// Term mini-language for blip bases and nuisance designs.
//
//   term   := factor ('*' factor)*
//   factor := atom ('^' number)?
//   atom   := number | m | k | dur | A | Y | <covariate>
//           | cov(<covariate>) | sqrt(<atom>) | log(<atom>)
//
// `m` and `k` are calendar months (grid month + origin), `dur` is k - m,
// `A` is the treatment indicator and `Y` the outcome at month m.
// Examples: "1", "m*dur", "m^2*dur", "cov(gender)*dur", "Y^0.75*dur", "dur^1.5".

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "snmm/error.hpp"

namespace snmm {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct TermContext {
  double m = kNaN;
  double k = kNaN;
  double treated = kNaN;
  double outcome = kNaN;
  std::span<const double> covariates;
};

/// Atoms a given model is allowed to reference.
struct TermScope {
  bool outcome_month = false;  // k, dur
  bool treatment = false;      // A

  static TermScope month_only() { return {}; }
  static TermScope with_outcome_month() { return {true, false}; }
  static TermScope with_treatment() { return {false, true}; }
};

class Term {
 public:
  enum class Atom { constant, month, outcome_month, duration, treated, outcome, covariate };
  enum class Fn { none, sqrt, log };

  struct Factor {
    Atom atom = Atom::constant;
    Fn fn = Fn::none;
    int covariate = -1;
    double constant = 1.0;
    double exponent = 1.0;
    std::string text;
  };

  Term() = default;

  static Term parse(std::string_view text, const std::vector<std::string>& covariates,
                    TermScope scope = TermScope::with_outcome_month()) {
    Term t;
    std::vector<std::string> pieces;
    std::string cur;
    int depth = 0;
    for (char c : text) {
      if (std::isspace(static_cast<unsigned char>(c))) continue;
      if (c == '(') ++depth;
      if (c == ')') --depth;
      if (c == '*' && depth == 0) {
        pieces.push_back(cur);
        cur.clear();
      } else {
        cur.push_back(c);
      }
    }
    pieces.push_back(cur);
    for (const auto& piece : pieces) {
      if (piece.empty()) throw ConfigError("term '" + std::string(text) + "': empty factor");
      t.factors_.push_back(parse_factor(piece, covariates, scope, text));
    }
    std::vector<std::string> parts;
    for (const auto& f : t.factors_) parts.push_back(f.text);
    std::sort(parts.begin(), parts.end());
    for (std::size_t i = 0; i < parts.size(); ++i) t.text_ += (i ? "*" : "") + parts[i];
    t.source_ = std::string(text);
    return t;
  }

  double operator()(const TermContext& ctx) const {
    double v = 1.0;
    for (const auto& f : factors_) v *= eval_factor(f, ctx);
    return v;
  }

  /// Canonical form (factors sorted); equal texts denote the same function.
  const std::string& text() const { return text_; }
  const std::string& source() const { return source_; }
  const std::vector<Factor>& factors() const { return factors_; }

  /// True when some factor is a positive power of the treatment duration.
  bool vanishes_at_zero_duration() const {
    return std::any_of(factors_.begin(), factors_.end(), [](const Factor& f) {
      return f.atom == Atom::duration && f.fn == Fn::none && f.exponent > 0;
    });
  }

 private:
  static double eval_factor(const Factor& f, const TermContext& ctx) {
    double base = 0.0;
    switch (f.atom) {
      case Atom::constant: base = f.constant; break;
      case Atom::month: base = ctx.m; break;
      case Atom::outcome_month: base = ctx.k; break;
      case Atom::duration: base = ctx.k - ctx.m; break;
      case Atom::treated: base = ctx.treated; break;
      case Atom::outcome: base = ctx.outcome; break;
      case Atom::covariate: base = ctx.covariates[static_cast<std::size_t>(f.covariate)]; break;
    }
    if (f.fn == Fn::sqrt) base = std::sqrt(base);
    if (f.fn == Fn::log) base = std::log(base);
    if (f.exponent == 1.0) return base;
    if (f.exponent == 2.0) return base * base;
    return std::pow(base, f.exponent);
  }

  static Factor parse_factor(const std::string& piece, const std::vector<std::string>& covariates,
                             TermScope scope, std::string_view whole) {
    Factor f;
    std::string body = piece;
    // exponent applies to the whole factor: split at the last '^' outside parentheses
    int depth = 0;
    std::size_t caret = std::string::npos;
    for (std::size_t i = 0; i < piece.size(); ++i) {
      if (piece[i] == '(') ++depth;
      if (piece[i] == ')') --depth;
      if (piece[i] == '^' && depth == 0) caret = i;
    }
    if (caret != std::string::npos) {
      body = piece.substr(0, caret);
      const std::string ex = piece.substr(caret + 1);
      try {
        std::size_t used = 0;
        f.exponent = std::stod(ex, &used);
        if (used != ex.size()) throw std::invalid_argument(ex);
      } catch (const std::exception&) {
        throw ConfigError("term '" + std::string(whole) + "': bad exponent '" + ex + "'");
      }
    }
    auto strip_call = [&](const char* name) -> bool {
      const std::string prefix = std::string(name) + "(";
      if (body.rfind(prefix, 0) == 0 && body.back() == ')') {
        body = body.substr(prefix.size(), body.size() - prefix.size() - 1);
        return true;
      }
      return false;
    };
    if (strip_call("sqrt")) f.fn = Fn::sqrt;
    else if (strip_call("log")) f.fn = Fn::log;
    strip_call("cov");

    if (body.empty()) throw ConfigError("term '" + std::string(whole) + "': empty atom");
    if (std::isdigit(static_cast<unsigned char>(body[0])) || body[0] == '.' || body[0] == '-') {
      try {
        std::size_t used = 0;
        f.constant = std::stod(body, &used);
        if (used != body.size()) throw std::invalid_argument(body);
      } catch (const std::exception&) {
        throw ConfigError("term '" + std::string(whole) + "': bad number '" + body + "'");
      }
      f.atom = Atom::constant;
    } else if (body == "m") {
      f.atom = Atom::month;
    } else if (body == "k") {
      f.atom = Atom::outcome_month;
    } else if (body == "dur") {
      f.atom = Atom::duration;
    } else if (body == "A") {
      f.atom = Atom::treated;
    } else if (body == "Y") {
      f.atom = Atom::outcome;
    } else {
      auto it = std::find(covariates.begin(), covariates.end(), body);
      if (it == covariates.end())
        throw ConfigError("term '" + std::string(whole) + "': unknown covariate '" + body + "'");
      f.atom = Atom::covariate;
      f.covariate = static_cast<int>(it - covariates.begin());
    }
    if ((f.atom == Atom::outcome_month || f.atom == Atom::duration) && !scope.outcome_month)
      throw ConfigError("term '" + std::string(whole) + "': '" + body + "' is not available in this model");
    if (f.atom == Atom::treated && !scope.treatment)
      throw ConfigError("term '" + std::string(whole) + "': 'A' is not available in this model");

    f.text = body;
    if (f.fn == Fn::sqrt) f.text = "sqrt(" + f.text + ")";
    if (f.fn == Fn::log) f.text = "log(" + f.text + ")";
    if (f.exponent != 1.0) {
      std::string ex = std::to_string(f.exponent);
      ex.erase(ex.find_last_not_of('0') + 1);
      if (!ex.empty() && ex.back() == '.') ex.pop_back();
      f.text += "^" + ex;
    }
    return f;
  }

  std::vector<Factor> factors_;
  std::string text_;
  std::string source_;
};

/// An ordered list of terms; the columns of a design matrix or a blip basis.
class Design {
 public:
  Design() = default;
  Design(const std::vector<std::string>& specs, const std::vector<std::string>& covariates,
         TermScope scope, std::string name = "design")
      : name_(std::move(name)) {
    if (specs.empty()) throw ConfigError(name_ + ": at least one term is required");
    for (const auto& s : specs) {
      Term t = Term::parse(s, covariates, scope);
      for (const auto& prev : terms_)
        if (prev.text() == t.text()) throw ConfigError(name_ + ": duplicate term '" + s + "'");
      terms_.push_back(std::move(t));
    }
  }

  std::size_t size() const { return terms_.size(); }
  bool empty() const { return terms_.empty(); }
  const std::vector<Term>& terms() const { return terms_; }
  const std::string& name() const { return name_; }

  std::vector<std::string> sources() const {
    std::vector<std::string> out;
    for (const auto& t : terms_) out.push_back(t.source());
    return out;
  }

  void evaluate(const TermContext& ctx, std::span<double> out) const {
    for (std::size_t j = 0; j < terms_.size(); ++j) out[j] = terms_[j](ctx);
  }

 private:
  std::string name_;
  std::vector<Term> terms_;
};

}  // namespace snmm
