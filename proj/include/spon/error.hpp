#pragma once

#include <stdexcept>
#include <string>

namespace spon {

// Base class for every error raised by the library. The subclasses map onto the
// CLI exit-code contract: InputError -> 2, FormatError -> 3, NumericError -> 4.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shape or dimension mismatch between operands.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Bad caller-supplied input: out-of-range token, missing path, too few tokens.
class InputError : public Error {
public:
    using Error::Error;
};

// Malformed or incompatible artifact (model file, JSON artifact).
class FormatError : public Error {
public:
    using Error::Error;
};

// A NaN or Inf appeared where only finite values are allowed.
class NumericError : public Error {
public:
    using Error::Error;
};

}  // namespace spon
