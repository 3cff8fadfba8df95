#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <variant>

namespace mvm {

/// Structured failure: a stable machine-readable code plus a human message.
/// Codes double as wire-protocol error codes and test oracles.
struct Error {
    std::string code;
    std::string message;
};

namespace errc {
// codec
inline constexpr std::string_view BadMagic = "BadMagic";
inline constexpr std::string_view UnsupportedVersion = "UnsupportedVersion";
inline constexpr std::string_view Truncated = "Truncated";
inline constexpr std::string_view TrailingBytes = "TrailingBytes";
inline constexpr std::string_view HashMismatch = "HashMismatch";
inline constexpr std::string_view NoEntryMethod = "NoEntryMethod";
inline constexpr std::string_view BadEncoding = "BadEncoding";
// instrumentation / loading
inline constexpr std::string_view AlreadyInstrumented = "AlreadyInstrumented";
inline constexpr std::string_view NotInstrumented = "NotInstrumented";
inline constexpr std::string_view VerificationFailed = "VerificationFailed";
// execution control
inline constexpr std::string_view InvalidTransition = "InvalidTransition";
// image
inline constexpr std::string_view NotSuspended = "NotSuspended";
inline constexpr std::string_view NotAllParked = "NotAllParked";
inline constexpr std::string_view MalformedImage = "MalformedImage";
// node
inline constexpr std::string_view UnknownKind = "UnknownKind";
inline constexpr std::string_view MalformedFrame = "MalformedFrame";
inline constexpr std::string_view UnknownEntity = "UnknownEntity";
inline constexpr std::string_view DuplicateEntity = "DuplicateEntity";
inline constexpr std::string_view DestinationUnreachable = "DestinationUnreachable";
inline constexpr std::string_view TransferRejected = "TransferRejected";
} // namespace errc

inline Error make_error(std::string_view code, std::string message) {
    return Error{std::string(code), std::move(message)};
}

/// Minimal expected-style result. Holds either a T or an Error.
template <class T>
class Result {
  public:
    Result(T value) : data_(std::move(value)) {}
    Result(Error err) : data_(std::move(err)) {}

    bool ok() const { return std::holds_alternative<T>(data_); }
    explicit operator bool() const { return ok(); }

    T &value() { return std::get<T>(data_); }
    const T &value() const { return std::get<T>(data_); }
    T take() { return std::move(std::get<T>(data_)); }

    const Error &error() const { return std::get<Error>(data_); }

  private:
    std::variant<T, Error> data_;
};

template <>
class Result<void> {
  public:
    Result() = default;
    Result(Error err) : err_(std::move(err)) {}

    bool ok() const { return !err_.has_value(); }
    explicit operator bool() const { return ok(); }
    const Error &error() const { return *err_; }

  private:
    std::optional<Error> err_;
};

} // namespace mvm
