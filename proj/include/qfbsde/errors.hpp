#pragma once

#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace qfbsde {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionMismatch : public Error {
public:
    using Error::Error;
};

/// sigma(t,x) could not be inverted at the reported point.
class NonconvertibleCoefficient : public Error {
public:
    NonconvertibleCoefficient(double t, std::vector<double> x)
        : Error(describe(t, x)), t_(t), x_(std::move(x)) {}

    double t() const noexcept { return t_; }
    const std::vector<double>& x() const noexcept { return x_; }

private:
    static std::string describe(double t, const std::vector<double>& x) {
        std::ostringstream os;
        os.precision(17);
        os << "sigma is singular at t=" << t << ", x=(";
        for (std::size_t k = 0; k < x.size(); ++k) os << (k ? ", " : "") << x[k];
        os << ")";
        return os.str();
    }

    double t_;
    std::vector<double> x_;
};

/// Configuration or input validation failure; `path` names the offending field.
class ValidationError : public Error {
public:
    ValidationError(std::string path, const std::string& what)
        : Error(path + ": " + what), path_(std::move(path)) {}
    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

/// Failures of the numerical pipeline (CFL, blow-up, extrapolation, ...).
class NumericFailure : public Error {
public:
    using Error::Error;
};

class CflViolation : public NumericFailure {
public:
    using NumericFailure::NumericFailure;
};

/// Non-finite value produced while marching the PDE.
class NonFiniteValue : public NumericFailure {
public:
    NonFiniteValue(long level, long node, const std::string& what)
        : NumericFailure(what), level_(level), node_(node) {}
    long level() const noexcept { return level_; }
    long node() const noexcept { return node_; }

private:
    long level_;
    long node_;
};

/// Query outside the grid box or the time horizon.
class ExtrapolationError : public NumericFailure {
public:
    using NumericFailure::NumericFailure;
};

class InsufficientData : public NumericFailure {
public:
    using NumericFailure::NumericFailure;
};

}  // namespace qfbsde
