#pragma once

#include <stdexcept>
#include <string>

namespace vinpaint {

/// Shapes of two operands (or an operand and a requested shape) are incompatible.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A serialized file violates the checkpoint format. `field()` names the
/// header field or section that failed validation.
class FormatError : public std::runtime_error {
public:
    FormatError(std::string field, const std::string& message)
        : std::runtime_error(field + ": " + message), field_(std::move(field)) {}

    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

/// Checkpoint arithmetic hit an incompatible entry; `key()` is the tensor name.
class MergeError : public std::runtime_error {
public:
    MergeError(std::string key, const std::string& message)
        : std::runtime_error(key + ": " + message), key_(std::move(key)) {}

    const std::string& key() const noexcept { return key_; }

private:
    std::string key_;
};

/// A pretrained parameter could not be loaded into a parameter slot.
class LoadError : public std::runtime_error {
public:
    LoadError(std::string entry, const std::string& message)
        : std::runtime_error(entry + ": " + message), entry_(std::move(entry)) {}

    const std::string& entry() const noexcept { return entry_; }

private:
    std::string entry_;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised when no phrase in the first annotated frame passes the score threshold.
class AssociationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A computation produced non-finite values.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace vinpaint
