#pragma once

#include <stdexcept>
#include <string>

namespace castckt {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

class SeriesTooShort : public Error {
   public:
    using Error::Error;
};

class DegenerateSeries : public Error {
   public:
    using Error::Error;
};

class InsufficientPoints : public Error {
   public:
    using Error::Error;
};

class NonFiniteInput : public Error {
   public:
    using Error::Error;
};

class ShapeMismatch : public Error {
   public:
    using Error::Error;
};

class NonScalarLoss : public Error {
   public:
    using Error::Error;
};

class RankDeficient : public Error {
   public:
    using Error::Error;
};

class NonPositiveVariance : public Error {
   public:
    using Error::Error;
};

/// Raised when training produces a NaN/Inf loss; `what()` carries the diagnostic dump.
class NonFiniteLoss : public Error {
   public:
    using Error::Error;
};

/// A caller-supplied parameter outside its documented range.
class InvalidArgument : public Error {
   public:
    using Error::Error;
};

/// Malformed files, unknown keys, missing fields.
class FormatError : public Error {
   public:
    using Error::Error;
};

}  // namespace castckt
