#pragma once

#include <cctype>
#include <charconv>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "advasm/asm_core.hpp"

// Text form of a function:
//
//   fn NAME:
//     [LABEL:] OPCODE [op1[, op2]]
//     LABEL:                      # binds to the next instruction
//
// Operands: registers (rax), immediates (decimal or 0x-hex),
// memory ([base], [base+8], [base+index*4-16]) and label targets (.L2).
// '#' starts a comment. Rendering emits a canonical layout that parses back
// to a structurally identical function.

namespace advasm {

struct ParseError : std::runtime_error {
  enum class Kind { syntax, unknown_opcode, unresolved_label };

  Kind kind;
  int line;    // 1-based
  int column;  // 1-based
  std::string reason;

  ParseError(Kind k, int ln, int col, std::string why)
      : std::runtime_error("parse error at " + std::to_string(ln) + ":" +
                           std::to_string(col) + ": " + why),
        kind(k), line(ln), column(col), reason(std::move(why)) {}
};

namespace detail {

struct LineScanner {
  std::string_view s;
  int line;
  std::size_t pos = 0;

  [[noreturn]] void fail(const std::string& why,
                         ParseError::Kind kind = ParseError::Kind::syntax) const {
    throw ParseError(kind, line, static_cast<int>(pos) + 1, why);
  }

  void skip_ws() {
    while (pos < s.size() && (s[pos] == ' ' || s[pos] == '\t')) ++pos;
  }
  bool done() {
    skip_ws();
    return pos >= s.size();
  }
  char peek() const { return pos < s.size() ? s[pos] : '\0'; }
  bool consume(char c) {
    skip_ws();
    if (peek() == c) {
      ++pos;
      return true;
    }
    return false;
  }
  void expect(char c, const std::string& what) {
    if (!consume(c)) fail("expected '" + std::string(1, c) + "' " + what);
  }

  static bool ident_start(char c) {
    return std::isalpha(static_cast<unsigned char>(c)) || c == '_';
  }
  static bool ident_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_';
  }

  std::string ident() {
    skip_ws();
    if (pos >= s.size() || !ident_start(s[pos])) fail("expected identifier");
    std::size_t start = pos;
    while (pos < s.size() && ident_char(s[pos])) ++pos;
    return std::string(s.substr(start, pos - start));
  }

  std::int64_t integer() {
    skip_ws();
    std::size_t start = pos;
    bool neg = false;
    if (peek() == '-' || peek() == '+') {
      neg = s[pos] == '-';
      ++pos;
    }
    int base = 10;
    if (pos + 1 < s.size() && s[pos] == '0' && (s[pos + 1] == 'x' || s[pos + 1] == 'X')) {
      base = 16;
      pos += 2;
    }
    std::uint64_t mag = 0;
    const char* first = s.data() + pos;
    const char* last = s.data() + s.size();
    auto [p, ec] = std::from_chars(first, last, mag, base);
    if (ec != std::errc() || p == first) {
      pos = start;
      fail("expected integer");
    }
    pos = static_cast<std::size_t>(p - s.data());
    if (neg) {
      if (mag > 0x8000000000000000ull) fail("immediate out of range");
      return -static_cast<std::int64_t>(mag);
    }
    if (mag > 0x7fffffffffffffffull) fail("immediate out of range");
    return static_cast<std::int64_t>(mag);
  }

  std::uint8_t scale_factor() {
    std::int64_t sc = integer();
    if (sc != 1 && sc != 2 && sc != 4 && sc != 8) fail("scale must be 1, 2, 4 or 8");
    return static_cast<std::uint8_t>(sc);
  }

  Operand operand() {
    skip_ws();
    if (done()) fail("expected operand");
    char c = peek();
    if (c == '.') {
      ++pos;
      return Operand::label(ident());
    }
    if (c == '[') {
      ++pos;
      MemRef m;
      std::string first = ident();
      auto freg = reg_from_name(first);
      if (!freg) fail("unknown register '" + first + "'");
      skip_ws();
      if (consume('*')) {
        // Index-only form "[reg*scale...]".
        m.index = *freg;
        m.scale = scale_factor();
      } else {
        m.base = *freg;
        // Optional "+ index * scale".
        std::size_t mark = pos;
        if (consume('+')) {
          skip_ws();
          if (pos < s.size() && ident_start(s[pos])) {
            std::string idx = ident();
            auto ireg = reg_from_name(idx);
            if (!ireg) fail("unknown register '" + idx + "'");
            m.index = *ireg;
            expect('*', "before scale");
            m.scale = scale_factor();
          } else {
            pos = mark;  // it was "+ disp"
          }
        }
      }
      skip_ws();
      if (peek() == '+' || peek() == '-') {
        std::int64_t d = integer();
        if (d < INT32_MIN || d > INT32_MAX) fail("displacement out of range");
        m.disp = static_cast<std::int32_t>(d);
      }
      expect(']', "to close memory operand");
      return Operand::mem(m);
    }
    if (ident_start(c)) {
      std::string name = ident();
      auto r = reg_from_name(name);
      if (!r) fail("unknown register '" + name + "'");
      return Operand::reg(*r);
    }
    return Operand::imm(integer());
  }
};

inline std::string_view strip_comment(std::string_view line) {
  auto hash = line.find('#');
  if (hash != std::string_view::npos) line = line.substr(0, hash);
  while (!line.empty() && (line.back() == ' ' || line.back() == '\t' || line.back() == '\r')) {
    line.remove_suffix(1);
  }
  return line;
}

}  // namespace detail

inline Function parse_function(std::string_view text) {
  Function fn;
  bool saw_header = false;
  std::vector<std::pair<std::string, int>> pending_labels;  // name, line
  // Label operand references for post-hoc resolution: name, line, col.
  std::vector<std::tuple<std::string, int, int>> references;

  int line_no = 0;
  std::size_t cursor = 0;
  while (cursor <= text.size()) {
    auto eol = text.find('\n', cursor);
    std::string_view raw = text.substr(
        cursor, eol == std::string_view::npos ? text.size() - cursor : eol - cursor);
    cursor = eol == std::string_view::npos ? text.size() + 1 : eol + 1;
    ++line_no;

    std::string_view line = detail::strip_comment(raw);
    detail::LineScanner sc{line, line_no};
    if (sc.done()) continue;

    if (!saw_header) {
      std::string kw = sc.ident();
      if (kw != "fn") sc.fail("expected 'fn NAME:' header");
      fn.name = sc.ident();
      sc.expect(':', "after function name");
      if (!sc.done()) sc.fail("unexpected text after header");
      saw_header = true;
      continue;
    }

    // "LABEL:" prefix (possibly several stacked via separate lines).
    std::size_t before = sc.pos;
    std::string first = sc.ident();
    bool is_label = sc.consume(':');
    std::string op_name;
    if (is_label) {
      if (fn.labels.count(first) ||
          std::find_if(pending_labels.begin(), pending_labels.end(),
                       [&](const auto& p) { return p.first == first; }) !=
              pending_labels.end()) {
        sc.fail("duplicate label '" + first + "'");
      }
      pending_labels.emplace_back(first, line_no);
      if (sc.done()) continue;  // bare label line
      op_name = sc.ident();
    } else {
      sc.pos = before;
      op_name = sc.ident();
    }

    auto op = opcode_from_name(op_name);
    if (!op) {
      sc.fail("unknown opcode '" + op_name + "'", ParseError::Kind::unknown_opcode);
    }

    std::vector<Operand> ops;
    if (!sc.done()) {
      for (;;) {
        std::size_t col = sc.pos;
        Operand o = sc.operand();
        if (o.is_label() && *op != Opcode::call) {  // callees may be external
          references.emplace_back(o.label_, line_no, static_cast<int>(col) + 1);
        }
        ops.push_back(std::move(o));
        if (!sc.consume(',')) break;
      }
    }
    if (!sc.done()) sc.fail("unexpected text after operands");

    std::string why;
    if (!valid_instruction_form(*op, ops, &why)) sc.fail(why);

    for (auto& [label, _] : pending_labels) {
      fn.labels[label] = fn.instructions.size();
    }
    pending_labels.clear();
    fn.instructions.emplace_back(*op, std::move(ops));
  }

  if (!saw_header) {
    throw ParseError(ParseError::Kind::syntax, 1, 1, "expected 'fn NAME:' header");
  }
  if (fn.instructions.empty()) {
    throw ParseError(ParseError::Kind::syntax, line_no, 1, "function has no instructions");
  }
  if (!pending_labels.empty()) {
    throw ParseError(ParseError::Kind::syntax, pending_labels.front().second, 1,
                     "label '" + pending_labels.front().first +
                         "' binds past the end of the function");
  }
  for (const auto& [name, ln, col] : references) {
    if (!fn.labels.count(name)) {
      throw ParseError(ParseError::Kind::unresolved_label, ln, col,
                       "unresolved label '" + name + "'");
    }
  }
  return fn;
}

inline std::string render_operand(const Operand& o) {
  switch (o.kind) {
    case Operand::Kind::reg:
      return reg_name(o.reg_);
    case Operand::Kind::imm:
      return std::to_string(o.imm_);
    case Operand::Kind::label:
      return "." + o.label_;
    case Operand::Kind::mem: {
      const MemRef& m = o.mem_;
      std::string out = "[";
      if (m.base) out += reg_name(*m.base);
      if (m.index) {
        if (m.base) out += "+";
        out += reg_name(*m.index);
        out += "*";
        out += std::to_string(static_cast<int>(m.scale));
      }
      if (m.disp != 0) {
        out += m.disp > 0 ? "+" : "-";
        out += std::to_string(std::abs(static_cast<std::int64_t>(m.disp)));
      }
      out += "]";
      return out;
    }
  }
  return "";
}

inline std::string render_instruction(const Instruction& ins) {
  std::string out = opcode_name(ins.op);
  for (std::size_t i = 0; i < ins.operands.size(); ++i) {
    out += i == 0 ? " " : ", ";
    out += render_operand(ins.operands[i]);
  }
  return out;
}

inline std::string render_function(const Function& fn) {
  std::string out = "fn " + fn.name + ":\n";
  // labels is an ordered map, so same-index labels come out sorted by name.
  std::vector<std::vector<const std::string*>> at(fn.instructions.size());
  for (const auto& [label, idx] : fn.labels) at[idx].push_back(&label);
  for (std::size_t i = 0; i < fn.instructions.size(); ++i) {
    for (const std::string* label : at[i]) out += *label + ":\n";
    out += "  " + render_instruction(fn.instructions[i]) + "\n";
  }
  return out;
}

}  // namespace advasm
