#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "mvm/error.hpp"
#include "mvm/value.hpp"

namespace mvm {

/// Little-endian byte sink used by every serialized format in the project.
/// Strings are u16-length-prefixed UTF-8.
class ByteWriter {
  public:
    const std::vector<uint8_t> &bytes() const { return buf_; }
    std::vector<uint8_t> take() { return std::move(buf_); }
    size_t size() const { return buf_.size(); }

    void u8(uint8_t v) { buf_.push_back(v); }
    void u16(uint16_t v) {
        buf_.push_back(static_cast<uint8_t>(v));
        buf_.push_back(static_cast<uint8_t>(v >> 8));
    }
    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
    void i64(int64_t v) {
        auto u = static_cast<uint64_t>(v);
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<uint8_t>(u >> (8 * i)));
    }
    void raw(const void *data, size_t n) {
        const auto *p = static_cast<const uint8_t *>(data);
        buf_.insert(buf_.end(), p, p + n);
    }
    void str(const std::string &s) {
        u16(static_cast<uint16_t>(s.size()));
        raw(s.data(), s.size());
    }
    void value(const Value &v) {
        u8(static_cast<uint8_t>(v.kind()));
        switch (v.kind()) {
        case ValueKind::null_v: break;
        case ValueKind::int_v: i64(v.as_int()); break;
        case ValueKind::bool_v: u8(v.as_bool() ? 1 : 0); break;
        case ValueKind::str_v: str(v.as_str()); break;
        case ValueKind::ref_v: u32(v.as_ref().id); break;
        }
    }

  private:
    std::vector<uint8_t> buf_;
};

/// Bounds-checked reader over an immutable byte span. All read functions
/// report Truncated instead of reading past the end.
class ByteReader {
  public:
    ByteReader(const uint8_t *data, size_t size) : data_(data), size_(size) {}
    explicit ByteReader(const std::vector<uint8_t> &b) : ByteReader(b.data(), b.size()) {}

    size_t pos() const { return pos_; }
    size_t remaining() const { return size_ - pos_; }
    bool at_end() const { return pos_ == size_; }

    Result<uint8_t> u8() {
        if (remaining() < 1) return truncated();
        return data_[pos_++];
    }
    Result<uint16_t> u16() {
        if (remaining() < 2) return truncated();
        uint16_t v = static_cast<uint16_t>(data_[pos_]) | static_cast<uint16_t>(data_[pos_ + 1]) << 8;
        pos_ += 2;
        return v;
    }
    Result<uint32_t> u32() {
        if (remaining() < 4) return truncated();
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(data_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    Result<int64_t> i64() {
        if (remaining() < 8) return truncated();
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(data_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return static_cast<int64_t>(v);
    }
    Result<std::string> str() {
        auto n = u16();
        if (!n) return n.error();
        if (remaining() < n.value()) return truncated();
        std::string s(reinterpret_cast<const char *>(data_ + pos_), n.value());
        pos_ += n.value();
        return s;
    }
    Result<Value> value() {
        auto tag = u8();
        if (!tag) return tag.error();
        switch (static_cast<ValueKind>(tag.value())) {
        case ValueKind::null_v: return Value::null();
        case ValueKind::int_v: {
            auto v = i64();
            if (!v) return v.error();
            return Value::integer(v.value());
        }
        case ValueKind::bool_v: {
            auto v = u8();
            if (!v) return v.error();
            if (v.value() > 1) return Error{std::string(errc::BadEncoding), "bad bool byte"};
            return Value::boolean(v.value() == 1);
        }
        case ValueKind::str_v: {
            auto v = str();
            if (!v) return v.error();
            return Value::str(v.take());
        }
        case ValueKind::ref_v: {
            auto v = u32();
            if (!v) return v.error();
            return Value::ref(v.value());
        }
        }
        return Error{std::string(errc::BadEncoding), "bad value tag " + std::to_string(tag.value())};
    }
    Result<std::vector<uint8_t>> blob(size_t n) {
        if (remaining() < n) return truncated();
        std::vector<uint8_t> out(data_ + pos_, data_ + pos_ + n);
        pos_ += n;
        return out;
    }

  private:
    Error truncated() const { return Error{std::string(errc::Truncated), "unexpected end of input at byte " + std::to_string(pos_)}; }

    const uint8_t *data_;
    size_t size_;
    size_t pos_ = 0;
};

} // namespace mvm
