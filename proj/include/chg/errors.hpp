#pragma once

#include <stdexcept>
#include <string>

namespace chg {

// Root of every error the library throws on purpose. Anything else escaping
// the library is a bug.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class InvalidBatchError : public Error {
 public:
  using Error::Error;
};

class StaleTapeError : public Error {
 public:
  using Error::Error;
};

class VocabularyError : public Error {
 public:
  using Error::Error;
};

class ProbeError : public Error {
 public:
  using Error::Error;
};

class PatchError : public Error {
 public:
  using Error::Error;
};

class GenerationError : public Error {
 public:
  using Error::Error;
};

class CorruptionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss or gradient.
class NumericError : public Error {
 public:
  using Error::Error;
};

class TrainingFailure : public Error {
 public:
  using Error::Error;
};

// Corrupt file, hash mismatch, truncated blob.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

class MissingArtifactError : public Error {
 public:
  explicit MissingArtifactError(const std::string& path)
      : Error("missing artifact: " + path), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

}  // namespace chg
