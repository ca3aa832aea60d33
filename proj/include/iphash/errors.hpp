#pragma once

#include <stdexcept>
#include <string>

namespace iphash {

// Base class for every failure the library reports. Messages name the
// offending field, dimension or parameter so callers can print them as-is.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Shape disagreement between operands.
class DimensionError : public Error {
public:
    using Error::Error;
};

// A scalar argument violated its contract (tau <= 0, mask ratio out of
// range, non-finite input, ...).
class InvalidParameterError : public Error {
public:
    using Error::Error;
};

// An on-disk artifact failed validation.
class CorruptFileError : public Error {
public:
    using Error::Error;
};

// An index fell outside its container.
class IndexError : public Error {
public:
    using Error::Error;
};

// A vector that must carry exact {-1,+1} entries did not.
class InvalidCodeError : public Error {
public:
    using Error::Error;
};

// A row that must be a probability distribution was not normalized.
class InvalidDistributionError : public Error {
public:
    using Error::Error;
};

} // namespace iphash
