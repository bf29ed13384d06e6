#ifndef SGP_ERRORS_HPP
#define SGP_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace sgp {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NotPositiveDefinite : public Error {
public:
    using Error::Error;
};

class DimensionMismatch : public Error {
public:
    using Error::Error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

class IndexOutOfRange : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    ParseError(const std::string& msg, long row, long col)
        : Error(msg + " (row " + std::to_string(row) + ", column " + std::to_string(col) + ")"),
          row_(row), col_(col)
    {
    }

    long row() const { return row_; }
    long col() const { return col_; }

private:
    long row_;
    long col_;
};

class EmptyDataset : public Error {
public:
    using Error::Error;
};

class DegenerateColumn : public Error {
public:
    using Error::Error;
};

class LengthMismatch : public Error {
public:
    using Error::Error;
};

class EvaluationFailed : public Error {
public:
    using Error::Error;
};

class FixedPointMismatch : public Error {
public:
    FixedPointMismatch(const std::string& msg, double max_deviation)
        : Error(msg + " (max relative deviation " + std::to_string(max_deviation) + ")"),
          max_deviation_(max_deviation)
    {
    }

    double max_deviation() const { return max_deviation_; }

private:
    double max_deviation_;
};

} // namespace sgp

#endif
