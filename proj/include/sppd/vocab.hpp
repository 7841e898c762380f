#pragma once
// Token vocabulary for the modular-arithmetic toy grammar.
//
// Layout is positional: digit d is token d, then the three operators, then
// the three reserved markers.  The step separator and answer marker are the
// structural tokens: a reasoning step is a maximal token run between
// separators, and the final (answer) step is `ans <digit> end`.

#include <string>
#include <vector>

#include "sppd/common.hpp"

namespace sppd {

struct TokenVocab {
  int modulus = 17;

  explicit TokenVocab(int m = 17) : modulus(m) {
    if (m < 2) fail(errkind::param, "TokenVocab: modulus must be >= 2");
    if (size() > 32) fail(errkind::param, "TokenVocab: size cap is 32 tokens (modulus <= 26)");
  }

  int size() const { return modulus + 6; }
  int op_add() const { return modulus; }
  int op_sub() const { return modulus + 1; }
  int op_mul() const { return modulus + 2; }
  int sep() const { return modulus + 3; }
  int ans() const { return modulus + 4; }
  int end() const { return modulus + 5; }

  bool is_digit(int t) const { return t >= 0 && t < modulus; }
  bool is_op(int t) const { return t >= op_add() && t <= op_mul(); }
  bool in_vocab(int t) const { return t >= 0 && t < size(); }

  std::string name(int t) const {
    if (is_digit(t)) return std::to_string(t);
    if (t == op_add()) return "+";
    if (t == op_sub()) return "-";
    if (t == op_mul()) return "*";
    if (t == sep()) return "|";
    if (t == ans()) return "ans";
    if (t == end()) return "end";
    fail(errkind::domain, "TokenVocab::name: token " + std::to_string(t) + " out of vocabulary");
  }

  int from_name(const std::string& s) const {
    for (int t = 0; t < size(); ++t)
      if (name(t) == s) return t;
    fail(errkind::domain, "TokenVocab::from_name: unknown symbol '" + s + "'");
  }

  // Fingerprint of the layout; checkpoints embed it so a net trained on one
  // vocabulary cannot be silently loaded against another.
  std::uint64_t hash() const {
    std::uint64_t h = fnv1a("toy-vocab-v1");
    h = fnv1a_pod(modulus, h);
    for (int t = 0; t < size(); ++t) h = fnv1a(name(t), h);
    return h;
  }

  std::string render(const std::vector<int>& tokens, char joiner = ' ') const {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (i) out += joiner;
      out += name(tokens[i]);
    }
    return out;
  }
};

}  // namespace sppd
