#pragma once

#include <stdexcept>
#include <string>

namespace waver {

// All library failures derive from Error so the CLI can map them to a
// non-zero exit code in one place.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Caller broke a documented precondition.
class ContractError : public Error {
public:
    using Error::Error;
};

// Tensor shapes do not line up.
class DimensionError : public ContractError {
public:
    using ContractError::ContractError;
};

// Argument outside the mathematical domain of a function.
class DomainError : public ContractError {
public:
    using ContractError::ContractError;
};

class UnsupportedMode : public ContractError {
public:
    using ContractError::ContractError;
};

class NumericDivergence : public Error {
public:
    NumericDivergence(const std::string& what, int step) : Error(what), step_(step) {}
    int step() const { return step_; }

private:
    int step_;
};

class IoError : public Error {
public:
    using Error::Error;
};

#define WAVER_REQUIRE(cond, ExcType, msg)      \
    do {                                       \
        if (!(cond)) throw ExcType(msg);       \
    } while (0)

}  // namespace waver
