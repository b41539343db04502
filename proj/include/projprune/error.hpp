#pragma once

#include <stdexcept>
#include <string>

namespace projprune {

// Base of every error the library throws. Commands map any of these to a
// nonzero exit status.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

// NaN or Inf appeared where only finite values are allowed.
class NumericFault : public Error {
public:
    using Error::Error;
};

// Operation invoked in the wrong lifecycle state (backprop before forward,
// revert without extend, ...).
class StateError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class UnsupportedTopology : public Error {
public:
    using Error::Error;
};

class UnsupportedSite : public Error {
public:
    using Error::Error;
};

class PlanError : public Error {
public:
    using Error::Error;
};

}  // namespace projprune
