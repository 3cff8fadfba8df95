#pragma once

// Line-oriented assembly front end. Directives:
//   .class <name> <field>*
//   .global <name>
//   .method <name> <paramCount> <localCount> ... .end
// Labels stand alone as "<ident>:"; '#' starts a comment. The parser keeps
// going after an error so one run reports as many diagnostics as possible.

#include <cctype>
#include <charconv>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mvm/isa.hpp"
#include "mvm/program_codec.hpp"

namespace mvm {

struct Diagnostic {
    int line = 0; // 1-based
    int column = 0;
    std::string code;
    std::string message;
};

struct ParseResult {
    std::optional<Program> program; // present iff diagnostics empty
    std::vector<Diagnostic> diagnostics;
    bool ok() const { return program.has_value(); }
};

namespace diag {
inline constexpr std::string_view UnknownMnemonic = "UnknownMnemonic";
inline constexpr std::string_view UndefinedLabel = "UndefinedLabel";
inline constexpr std::string_view DuplicateLabel = "DuplicateLabel";
inline constexpr std::string_view DuplicateMethod = "DuplicateMethod";
inline constexpr std::string_view DuplicateClass = "DuplicateClass";
inline constexpr std::string_view DuplicateGlobal = "DuplicateGlobal";
inline constexpr std::string_view ArityMismatch = "ArityMismatch";
inline constexpr std::string_view UnknownMethod = "UnknownMethod";
inline constexpr std::string_view UnknownClass = "UnknownClass";
inline constexpr std::string_view UnknownGlobal = "UnknownGlobal";
inline constexpr std::string_view BadOperand = "BadOperand";
inline constexpr std::string_view BadDirective = "BadDirective";
inline constexpr std::string_view MissingEnd = "MissingEnd";
inline constexpr std::string_view StrayLine = "StrayLine";
inline constexpr std::string_view UnterminatedString = "UnterminatedString";
inline constexpr std::string_view NoEntryMethod = "NoEntryMethod";
inline constexpr std::string_view BadPrologue = "BadPrologue";
inline constexpr std::string_view BadDispatchTable = "BadDispatchTable";
} // namespace diag

namespace detail {

struct Token {
    std::string text;
    int column = 0;   // 1-based
    bool quoted = false;
};

// Splits one source line into tokens; strings keep their decoded content and
// a quoted flag. Returns false on an unterminated string literal.
inline bool tokenize_line(const std::string &line, std::vector<Token> &out, int &bad_col) {
    size_t i = 0;
    while (i < line.size()) {
        char c = line[i];
        if (c == '#') break;
        if (std::isspace(static_cast<unsigned char>(c))) {
            ++i;
            continue;
        }
        Token t;
        t.column = static_cast<int>(i) + 1;
        if (c == '"') {
            t.quoted = true;
            ++i;
            bool closed = false;
            while (i < line.size()) {
                char d = line[i];
                if (d == '\\' && i + 1 < line.size()) {
                    char e = line[i + 1];
                    switch (e) {
                    case 'n': t.text.push_back('\n'); break;
                    case 't': t.text.push_back('\t'); break;
                    case 'r': t.text.push_back('\r'); break;
                    case '\\': t.text.push_back('\\'); break;
                    case '"': t.text.push_back('"'); break;
                    default: t.text.push_back(e); break;
                    }
                    i += 2;
                    continue;
                }
                if (d == '"') {
                    closed = true;
                    ++i;
                    break;
                }
                t.text.push_back(d);
                ++i;
            }
            if (!closed) {
                bad_col = t.column;
                return false;
            }
        } else {
            while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i])) && line[i] != '#') {
                t.text.push_back(line[i]);
                ++i;
            }
        }
        out.push_back(std::move(t));
    }
    return true;
}

inline std::optional<Opcode> mnemonic_to_opcode(const std::string &m) {
    for (uint8_t b = kFirstOpcode; b <= kLastOpcode; ++b) {
        auto op = static_cast<Opcode>(b);
        if (opcode_name(op) == m) return op;
    }
    return std::nullopt;
}

inline bool is_ident(const std::string &s) {
    if (s.empty()) return false;
    if (!std::isalpha(static_cast<unsigned char>(s[0])) && s[0] != '_') return false;
    for (char c : s)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_') return false;
    return true;
}

} // namespace detail

class Assembler {
  public:
    ParseResult parse(const std::string &text) {
        reset();
        std::vector<std::string> lines;
        {
            std::string cur;
            for (char c : text) {
                if (c == '\n') {
                    lines.push_back(cur);
                    cur.clear();
                } else {
                    cur.push_back(c);
                }
            }
            lines.push_back(cur);
        }
        for (size_t n = 0; n < lines.size(); ++n) {
            line_no_ = static_cast<int>(n) + 1;
            parse_line(lines[n]);
        }
        if (in_method_) {
            report(diag::MissingEnd, 1, "method '" + cur_method_.name + "' missing .end");
            finish_method();
        }
        resolve_cross_references();
        ParseResult res;
        res.diagnostics = std::move(diags_);
        if (res.diagnostics.empty()) {
            refresh_content_hash(program_);
            res.program = std::move(program_);
        }
        return res;
    }

  private:
    void reset() {
        program_ = Program{};
        program_.entry_method = std::string(kEntryMethodName);
        diags_.clear();
        in_method_ = false;
        globals_seen_.clear();
    }

    void report(std::string_view code, int column, std::string message) {
        diags_.push_back(Diagnostic{line_no_, column, std::string(code), std::move(message)});
    }

    void parse_line(const std::string &line) {
        std::vector<detail::Token> toks;
        int bad_col = 0;
        if (!detail::tokenize_line(line, toks, bad_col)) {
            report(diag::UnterminatedString, bad_col, "unterminated string literal");
            return;
        }
        if (toks.empty()) return;
        const auto &head = toks[0];
        if (head.text[0] == '.' && !head.quoted) {
            parse_directive(toks);
            return;
        }
        if (!head.quoted && head.text.size() > 1 && head.text.back() == ':') {
            parse_label(toks);
            return;
        }
        parse_instruction(toks);
    }

    void parse_directive(const std::vector<detail::Token> &toks) {
        const std::string &d = toks[0].text;
        if (d == ".class") {
            if (in_method_) {
                report(diag::BadDirective, toks[0].column, ".class inside method body");
                return;
            }
            if (toks.size() < 2 || !detail::is_ident(toks[1].text)) {
                report(diag::BadDirective, toks[0].column, ".class needs a name");
                return;
            }
            std::vector<std::string> fields;
            for (size_t i = 2; i < toks.size(); ++i) {
                if (!detail::is_ident(toks[i].text)) {
                    report(diag::BadOperand, toks[i].column, "bad field name '" + toks[i].text + "'");
                    return;
                }
                fields.push_back(toks[i].text);
            }
            if (!program_.classes.emplace(toks[1].text, std::move(fields)).second)
                report(diag::DuplicateClass, toks[1].column, "class '" + toks[1].text + "' already defined");
        } else if (d == ".global") {
            if (in_method_) {
                report(diag::BadDirective, toks[0].column, ".global inside method body");
                return;
            }
            if (toks.size() != 2 || !detail::is_ident(toks[1].text)) {
                report(diag::BadDirective, toks[0].column, ".global needs one name");
                return;
            }
            if (!globals_seen_.insert(toks[1].text).second) {
                report(diag::DuplicateGlobal, toks[1].column, "global '" + toks[1].text + "' already declared");
                return;
            }
            program_.globals.push_back(toks[1].text);
        } else if (d == ".method") {
            if (in_method_) {
                report(diag::MissingEnd, toks[0].column, "method '" + cur_method_.name + "' missing .end");
                finish_method();
            }
            if (toks.size() != 4 || !detail::is_ident(toks[1].text)) {
                report(diag::BadDirective, toks[0].column, ".method needs <name> <paramCount> <localCount>");
                return;
            }
            uint32_t params = 0, locals = 0;
            if (!parse_uint(toks[2], params) || !parse_uint(toks[3], locals)) return;
            in_method_ = true;
            cur_method_ = MethodDef{};
            cur_method_.name = toks[1].text;
            cur_method_.param_count = params;
            cur_method_.local_count = locals;
            cur_labels_.clear();
            cur_label_refs_.clear();
            method_line_ = line_no_;
            if (locals < params)
                report(diag::BadDirective, toks[3].column, "localCount below paramCount");
        } else if (d == ".end") {
            if (!in_method_) {
                report(diag::BadDirective, toks[0].column, ".end outside method");
                return;
            }
            finish_method();
        } else {
            report(diag::BadDirective, toks[0].column, "unknown directive '" + d + "'");
        }
    }

    void parse_label(const std::vector<detail::Token> &toks) {
        if (!in_method_) {
            report(diag::StrayLine, toks[0].column, "label outside method");
            return;
        }
        std::string name = toks[0].text.substr(0, toks[0].text.size() - 1);
        if (!detail::is_ident(name)) {
            report(diag::BadOperand, toks[0].column, "bad label name '" + name + "'");
            return;
        }
        if (toks.size() > 1) {
            report(diag::StrayLine, toks[1].column, "label must stand alone on its line");
            return;
        }
        auto pc = static_cast<uint32_t>(cur_method_.code.size());
        if (!cur_labels_.emplace(name, pc).second)
            report(diag::DuplicateLabel, toks[0].column, "label '" + name + "' already defined");
    }

    bool parse_uint(const detail::Token &t, uint32_t &out) {
        if (t.quoted) {
            report(diag::BadOperand, t.column, "expected integer");
            return false;
        }
        uint64_t v = 0;
        auto [p, ec] = std::from_chars(t.text.data(), t.text.data() + t.text.size(), v);
        if (ec != std::errc() || p != t.text.data() + t.text.size() || v > 0xffffffffull) {
            report(diag::BadOperand, t.column, "expected integer, got '" + t.text + "'");
            return false;
        }
        out = static_cast<uint32_t>(v);
        return true;
    }

    bool parse_literal(const detail::Token &t, Value &out) {
        if (t.quoted) {
            out = Value::str(t.text);
            return true;
        }
        if (t.text == "true") {
            out = Value::boolean(true);
            return true;
        }
        if (t.text == "false") {
            out = Value::boolean(false);
            return true;
        }
        if (t.text == "null") {
            out = Value::null();
            return true;
        }
        int64_t v = 0;
        auto [p, ec] = std::from_chars(t.text.data(), t.text.data() + t.text.size(), v);
        if (ec == std::errc() && p == t.text.data() + t.text.size()) {
            out = Value::integer(v);
            return true;
        }
        report(diag::BadOperand, t.column, "bad literal '" + t.text + "'");
        return false;
    }

    // Records a label use to be resolved at .end.
    void use_label(const detail::Token &t, uint32_t instr_index, size_t table_slot, bool is_table) {
        cur_label_refs_.push_back({t.text, instr_index, table_slot, is_table, line_no_, t.column});
    }

    void parse_instruction(const std::vector<detail::Token> &toks) {
        if (!in_method_) {
            report(diag::StrayLine, toks[0].column, "instruction outside method");
            return;
        }
        auto op = detail::mnemonic_to_opcode(toks[0].text);
        if (!op) {
            report(diag::UnknownMnemonic, toks[0].column, "unknown mnemonic '" + toks[0].text + "'");
            return;
        }
        Instruction ins = make_instr(*op);
        auto pc = static_cast<uint32_t>(cur_method_.code.size());
        size_t argc = toks.size() - 1;
        auto wrong_operands = [&](const char *expected) {
            report(diag::BadOperand, toks[0].column,
                   std::string(opcode_name(*op)) + " expects " + expected);
        };
        switch (*op) {
        case Opcode::CONST:
            if (argc != 1) return wrong_operands("one literal");
            if (!parse_literal(toks[1], ins.imm)) return;
            break;
        case Opcode::LOAD:
        case Opcode::STORE:
        case Opcode::SLEEP:
        case Opcode::PRINT:
        case Opcode::APCSET:
        case Opcode::MENTER:
        case Opcode::MEXIT:
        case Opcode::MWAIT:
        case Opcode::MNOTIFY:
        case Opcode::MNOTIFYALL:
        case Opcode::MINVOKE_ENTER:
        case Opcode::MINVOKE_EXIT:
        case Opcode::MINVOKE_WAIT:
        case Opcode::MINVOKE_NOTIFY:
        case Opcode::MINVOKE_NOTIFYALL:
            if (argc != 1) return wrong_operands("one local index");
            if (!parse_uint(toks[1], ins.a)) return;
            break;
        case Opcode::JMP:
        case Opcode::JMPIF:
            if (argc != 1 || !detail::is_ident(toks[1].text)) return wrong_operands("one label");
            use_label(toks[1], pc, 0, false);
            break;
        case Opcode::INVOKE:
        case Opcode::SPAWN: {
            if (argc < 1 || !detail::is_ident(toks[1].text)) return wrong_operands("<method> [args...] [-> dst]");
            ins.sym = toks[1].text;
            size_t i = 2;
            while (i < toks.size() && toks[i].text != "->") {
                uint32_t arg = 0;
                if (!parse_uint(toks[i], arg)) return;
                ins.args.push_back(arg);
                ++i;
            }
            if (i < toks.size()) { // "->" dst
                if (i + 2 != toks.size()) return wrong_operands("a single destination after ->");
                uint32_t dst = 0;
                if (!parse_uint(toks[i + 1], dst)) return;
                ins.ret = dst;
            }
            invoke_sites_.push_back({cur_method_.name, pc, ins.sym, line_no_, toks[1].column});
            break;
        }
        case Opcode::RETURN:
            if (argc > 1) return wrong_operands("at most one local index");
            if (argc == 1) {
                uint32_t src = 0;
                if (!parse_uint(toks[1], src)) return;
                ins.ret = src;
            }
            break;
        case Opcode::NEWOBJ:
            if (argc != 3 || toks[2].text != "->") return wrong_operands("<class> -> <dst>");
            ins.sym = toks[1].text;
            if (!parse_uint(toks[3], ins.b)) return;
            class_uses_.push_back({ins.sym, line_no_, toks[1].column});
            break;
        case Opcode::GETFIELD:
            if (argc != 4 || toks[3].text != "->") return wrong_operands("<obj> <field> -> <dst>");
            if (!parse_uint(toks[1], ins.a)) return;
            ins.sym = toks[2].text;
            if (!parse_uint(toks[4], ins.b)) return;
            break;
        case Opcode::PUTFIELD:
            if (argc != 3) return wrong_operands("<obj> <field> <src>");
            if (!parse_uint(toks[1], ins.a)) return;
            ins.sym = toks[2].text;
            if (!parse_uint(toks[3], ins.b)) return;
            break;
        case Opcode::GETGLOBAL:
            if (argc != 3 || toks[2].text != "->") return wrong_operands("<name> -> <dst>");
            ins.sym = toks[1].text;
            if (!parse_uint(toks[3], ins.b)) return;
            global_uses_.push_back({ins.sym, line_no_, toks[1].column});
            break;
        case Opcode::PUTGLOBAL:
            if (argc != 2) return wrong_operands("<name> <src>");
            ins.sym = toks[1].text;
            if (!parse_uint(toks[2], ins.b)) return;
            global_uses_.push_back({ins.sym, line_no_, toks[1].column});
            break;
        case Opcode::DISPATCH:
            for (size_t i = 1; i < toks.size(); ++i) {
                if (!detail::is_ident(toks[i].text)) return wrong_operands("label list");
                use_label(toks[i], pc, ins.args.size(), true);
                ins.args.push_back(0); // patched at resolution
            }
            break;
        default:
            if (argc != 0) return wrong_operands("no operands");
            break;
        }
        cur_method_.code.push_back(std::move(ins));
    }

    void finish_method() {
        in_method_ = false;
        // label resolution
        for (const auto &ref : cur_label_refs_) {
            auto it = cur_labels_.find(ref.label);
            if (it == cur_labels_.end()) {
                diags_.push_back(Diagnostic{ref.line, ref.column, std::string(diag::UndefinedLabel),
                                            "undefined label '" + ref.label + "'"});
                continue;
            }
            auto &ins = cur_method_.code[ref.instr_index];
            if (ref.is_table)
                ins.args[ref.table_slot] = it->second;
            else
                ins.a = it->second;
        }
        reconstruct_instrumented_shape();
        std::string name = cur_method_.name;
        if (!program_.methods.emplace(name, std::move(cur_method_)).second)
            diags_.push_back(Diagnostic{method_line_, 1, std::string(diag::DuplicateMethod),
                                        "method '" + name + "' already defined"});
    }

    // A method written with instrumented-only opcodes must carry the full
    // prologue; the invoke table is derived from the code and checked against
    // the DISPATCH operand.
    void reconstruct_instrumented_shape() {
        bool uses = false;
        for (const auto &ins : cur_method_.code)
            if (is_instrumented_only(ins.op)) uses = true;
        if (!uses) return;
        const auto &code = cur_method_.code;
        if (code.size() < 3 || code[0].op != Opcode::APCINIT || code[1].op != Opcode::DISPATCH ||
            code[2].op != Opcode::CHECKPOINT) {
            diags_.push_back(Diagnostic{method_line_, 1, std::string(diag::BadPrologue),
                                        "instrumented method '" + cur_method_.name +
                                            "' must begin APCINIT, DISPATCH, CHECKPOINT"});
            return;
        }
        std::vector<uint32_t> table;
        for (uint32_t pc = 0; pc < code.size(); ++pc)
            if (is_invoke_class(code[pc].op)) table.push_back(pc);
        if (code[1].args != table) {
            diags_.push_back(Diagnostic{method_line_, 1, std::string(diag::BadDispatchTable),
                                        "DISPATCH table does not list the invoke-class pcs"});
            return;
        }
        cur_method_.instrumented = true;
        cur_method_.invoke_table = std::move(table);
    }

    void resolve_cross_references() {
        for (const auto &site : invoke_sites_) {
            auto it = program_.methods.find(site.callee);
            if (it == program_.methods.end()) {
                diags_.push_back(Diagnostic{site.line, site.column, std::string(diag::UnknownMethod),
                                            "call to undefined method '" + site.callee + "'"});
                continue;
            }
            auto mit = program_.methods.find(site.method);
            if (mit == program_.methods.end()) continue; // site's method had a duplicate-name error
            const auto &ins = mit->second.code[site.pc];
            if (ins.args.size() != it->second.param_count)
                diags_.push_back(Diagnostic{site.line, site.column, std::string(diag::ArityMismatch),
                                            "'" + site.callee + "' takes " + std::to_string(it->second.param_count) +
                                                " argument(s), got " + std::to_string(ins.args.size())});
        }
        for (const auto &use : class_uses_)
            if (!program_.classes.count(use.name))
                diags_.push_back(Diagnostic{use.line, use.column, std::string(diag::UnknownClass),
                                            "unknown class '" + use.name + "'"});
        std::sort(program_.globals.begin(), program_.globals.end());
        for (const auto &use : global_uses_)
            if (!std::binary_search(program_.globals.begin(), program_.globals.end(), use.name))
                diags_.push_back(Diagnostic{use.line, use.column, std::string(diag::UnknownGlobal),
                                            "undeclared global '" + use.name + "'"});
        auto entry = program_.methods.find(program_.entry_method);
        if (entry == program_.methods.end())
            diags_.push_back(Diagnostic{1, 1, std::string(diag::NoEntryMethod),
                                        "program defines no '" + program_.entry_method + "' method"});
        else if (entry->second.param_count != 0)
            diags_.push_back(Diagnostic{1, 1, std::string(diag::NoEntryMethod),
                                        "entry method must take no parameters"});
    }

    struct LabelRef {
        std::string label;
        uint32_t instr_index;
        size_t table_slot;
        bool is_table;
        int line;
        int column;
    };
    struct InvokeSite {
        std::string method;
        uint32_t pc;
        std::string callee;
        int line;
        int column;
    };
    struct NameUse {
        std::string name;
        int line;
        int column;
    };

    Program program_;
    std::vector<Diagnostic> diags_;
    int line_no_ = 0;
    bool in_method_ = false;
    int method_line_ = 0;
    MethodDef cur_method_;
    std::map<std::string, uint32_t> cur_labels_;
    std::vector<LabelRef> cur_label_refs_;
    std::vector<InvokeSite> invoke_sites_;
    std::vector<NameUse> class_uses_;
    std::vector<NameUse> global_uses_;
    std::set<std::string> globals_seen_;
};

inline ParseResult parse_assembly(const std::string &text) { return Assembler{}.parse(text); }

namespace detail {

inline std::string literal_text(const Value &v) {
    if (v.is_str()) {
        std::string out = "\"";
        for (char c : v.as_str()) {
            switch (c) {
            case '\n': out += "\\n"; break;
            case '\t': out += "\\t"; break;
            case '\r': out += "\\r"; break;
            case '\\': out += "\\\\"; break;
            case '"': out += "\\\""; break;
            default: out.push_back(c);
            }
        }
        out += "\"";
        return out;
    }
    return v.display();
}

} // namespace detail

/// Renders a Program as canonical assembly text; parse(emit(p)) == p.
inline std::string emit_assembly(const Program &p) {
    std::string out;
    for (const auto &[name, fields] : p.classes) {
        out += ".class " + name;
        for (const auto &f : fields) out += " " + f;
        out += "\n";
    }
    for (const auto &g : p.globals) out += ".global " + g + "\n";
    if (!p.classes.empty() || !p.globals.empty()) out += "\n";
    for (const auto &[name, m] : p.methods) {
        out += ".method " + name + " " + std::to_string(m.param_count) + " " + std::to_string(m.local_count) + "\n";
        std::set<uint32_t> targets;
        for (const auto &ins : m.code) {
            if (ins.op == Opcode::JMP || ins.op == Opcode::JMPIF) targets.insert(ins.a);
            if (ins.op == Opcode::DISPATCH)
                for (uint32_t t : ins.args) targets.insert(t);
        }
        auto label_of = [](uint32_t pc) { return "L" + std::to_string(pc); };
        for (uint32_t pc = 0; pc < m.code.size(); ++pc) {
            if (targets.count(pc)) out += label_of(pc) + ":\n";
            const auto &ins = m.code[pc];
            out += "    " + std::string(opcode_name(ins.op));
            switch (ins.op) {
            case Opcode::CONST: out += " " + detail::literal_text(ins.imm); break;
            case Opcode::LOAD:
            case Opcode::STORE:
            case Opcode::SLEEP:
            case Opcode::PRINT:
            case Opcode::APCSET:
            case Opcode::MENTER:
            case Opcode::MEXIT:
            case Opcode::MWAIT:
            case Opcode::MNOTIFY:
            case Opcode::MNOTIFYALL:
            case Opcode::MINVOKE_ENTER:
            case Opcode::MINVOKE_EXIT:
            case Opcode::MINVOKE_WAIT:
            case Opcode::MINVOKE_NOTIFY:
            case Opcode::MINVOKE_NOTIFYALL: out += " " + std::to_string(ins.a); break;
            case Opcode::JMP:
            case Opcode::JMPIF: out += " " + label_of(ins.a); break;
            case Opcode::INVOKE:
            case Opcode::SPAWN:
                out += " " + ins.sym;
                for (uint32_t arg : ins.args) out += " " + std::to_string(arg);
                if (ins.ret) out += " -> " + std::to_string(*ins.ret);
                break;
            case Opcode::RETURN:
                if (ins.ret) out += " " + std::to_string(*ins.ret);
                break;
            case Opcode::NEWOBJ: out += " " + ins.sym + " -> " + std::to_string(ins.b); break;
            case Opcode::GETFIELD:
                out += " " + std::to_string(ins.a) + " " + ins.sym + " -> " + std::to_string(ins.b);
                break;
            case Opcode::PUTFIELD:
                out += " " + std::to_string(ins.a) + " " + ins.sym + " " + std::to_string(ins.b);
                break;
            case Opcode::GETGLOBAL: out += " " + ins.sym + " -> " + std::to_string(ins.b); break;
            case Opcode::PUTGLOBAL: out += " " + ins.sym + " " + std::to_string(ins.b); break;
            case Opcode::DISPATCH:
                for (uint32_t t : ins.args) out += " " + label_of(t);
                break;
            default: break;
            }
            out += "\n";
        }
        out += ".end\n\n";
    }
    return out;
}

} // namespace mvm
