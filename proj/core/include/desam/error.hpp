// Copyright 2026 The DeSAM-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace desam {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

/// A file or text block does not follow its declared format.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// A value violates a documented invariant (range, uniqueness, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Tensor or array dimensions disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A requested key (sample id, site, parameter) does not exist.
class NotFoundError : public Error {
 public:
  using Error::Error;
};

/// Stored bytes fail their checksum or are truncated.
class CorruptionError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace desam
