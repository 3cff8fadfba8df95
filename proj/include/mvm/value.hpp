#pragma once

#include <cstdint>
#include <string>
#include <variant>

namespace mvm {

/// Heap object identifier. Ids are allocated starting at 1 and never reused.
struct Ref {
    uint32_t id = 0;
    friend bool operator==(Ref, Ref) = default;
    friend auto operator<=>(Ref, Ref) = default;
};

enum class ValueKind : uint8_t { null_v = 0, int_v = 1, bool_v = 2, str_v = 3, ref_v = 4 };

/// A runtime value: Int (64-bit signed), Bool, Str (UTF-8), Ref, or Null.
/// Deeply immutable; heap field writes replace whole values.
class Value {
  public:
    Value() = default;
    static Value integer(int64_t v) { return Value{v}; }
    static Value boolean(bool v) { return Value{v}; }
    static Value str(std::string v) { return Value{std::move(v)}; }
    static Value ref(uint32_t id) { return Value{Ref{id}}; }
    static Value null() { return Value{}; }

    ValueKind kind() const { return static_cast<ValueKind>(data_.index()); }
    bool is_null() const { return kind() == ValueKind::null_v; }
    bool is_int() const { return kind() == ValueKind::int_v; }
    bool is_bool() const { return kind() == ValueKind::bool_v; }
    bool is_str() const { return kind() == ValueKind::str_v; }
    bool is_ref() const { return kind() == ValueKind::ref_v; }

    int64_t as_int() const { return std::get<int64_t>(data_); }
    bool as_bool() const { return std::get<bool>(data_); }
    const std::string &as_str() const { return std::get<std::string>(data_); }
    Ref as_ref() const { return std::get<Ref>(data_); }

    friend bool operator==(const Value &, const Value &) = default;

    /// Console form: 42, true, hello, ref#3, null.
    std::string display() const {
        switch (kind()) {
        case ValueKind::null_v: return "null";
        case ValueKind::int_v: return std::to_string(as_int());
        case ValueKind::bool_v: return as_bool() ? "true" : "false";
        case ValueKind::str_v: return as_str();
        case ValueKind::ref_v: return "ref#" + std::to_string(as_ref().id);
        }
        return "?";
    }

  private:
    template <class T>
    explicit Value(T v) : data_(std::move(v)) {}

    std::variant<std::monostate, int64_t, bool, std::string, Ref> data_;
};

} // namespace mvm
