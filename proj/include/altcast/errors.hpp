#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace altcast {

// Base class for everything thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeMismatch : public Error {
public:
    using Error::Error;
};

// A forward op produced (or was handed) a NaN/Inf value.
class NonFiniteValue : public Error {
public:
    using Error::Error;
};

class NotScalarLoss : public Error {
public:
    using Error::Error;
};

// Attention over a single variable leaves every row fully masked.
class SingleChannel : public Error {
public:
    using Error::Error;
};

class FileNotFound : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    ParseError(std::size_t row, std::size_t col, const std::string& what)
        : Error("parse error at row " + std::to_string(row) + ", column " +
                std::to_string(col) + ": " + what),
          row_(row),
          col_(col) {}

    std::size_t row() const { return row_; }
    std::size_t col() const { return col_; }

private:
    std::size_t row_ = 0;
    std::size_t col_ = 0;
};

class EmptyDataset : public Error {
public:
    using Error::Error;
};

class SplitTooSmall : public Error {
public:
    using Error::Error;
};

class ConstantChannel : public Error {
public:
    using Error::Error;
};

// Optimizer was asked to update a parameter it has no moment buffers for.
class MissingState : public Error {
public:
    using Error::Error;
};

class WindowTooShort : public Error {
public:
    using Error::Error;
};

class InsufficientSamples : public Error {
public:
    using Error::Error;
};

class UnstableSystem : public Error {
public:
    using Error::Error;
};

class DegenerateTrajectory : public Error {
public:
    using Error::Error;
};

class NonFiniteLoss : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class EmptyTestSet : public Error {
public:
    using Error::Error;
};

}  // namespace altcast
