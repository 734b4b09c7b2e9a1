#pragma once

#include <stdexcept>
#include <string>

namespace snapcache {

// Base for everything the library throws on a broken contract.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Invalid configuration or hyperparameter (even kernel, bad capacity, ...).
class ConfigError : public Error {
public:
    using Error::Error;
};

// Tensor shapes or lengths that do not agree.
class ShapeError : public Error {
public:
    using Error::Error;
};

// NaN/Inf produced or an undefined distribution requested.
class NumericError : public Error {
public:
    using Error::Error;
};

} // namespace snapcache
