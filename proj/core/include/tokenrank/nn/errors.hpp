#pragma once

#include <stdexcept>
#include <string>

namespace tokenrank {

/// Base of every error raised by the library. The CLI maps subclasses onto
/// process exit codes (see tools/tokenrank_cli.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Caller violated an ordering or membership contract (e.g. dropping a token
/// that is no longer in the sequence).
class LogicError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

/// A pipeline stage needs an artifact (checkpoint, cache entry) that has not
/// been produced yet.
class MissingArtifactError : public Error {
 public:
  using Error::Error;
};

}  // namespace tokenrank
