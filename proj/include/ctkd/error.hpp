// Copyright 2026 The ctkd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace ctkd {

// Base for every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inputs violate a type invariant or an operation precondition.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// A file could not be opened, read, written, or failed an integrity check.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace ctkd
