#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace metavl {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Raised when a prompt or sequence does not fit the model context.
class OverlengthError : public Error {
 public:
  OverlengthError(std::size_t required, std::size_t available,
                  const std::string& what = "sequence")
      : Error(what + " needs " + std::to_string(required) +
              " positions but only " + std::to_string(available) +
              " are available"),
        required_(required),
        available_(available) {}

  std::size_t required() const noexcept { return required_; }
  std::size_t available() const noexcept { return available_; }

 private:
  std::size_t required_;
  std::size_t available_;
};

class VocabularyError : public Error {
 public:
  explicit VocabularyError(const std::string& word)
      : Error("word not in vocabulary: '" + word + "'"), word_(word) {}
  const std::string& word() const noexcept { return word_; }

 private:
  std::string word_;
};

class CheckpointError : public Error {
 public:
  CheckpointError(const std::string& field, const std::string& detail)
      : Error("checkpoint field '" + field + "': " + detail), field_(field) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class MissingDependencyError : public Error {
 public:
  using Error::Error;
};

// Violated training invariant (frozen weights moved, non-finite loss, ...).
class AuditError : public Error {
 public:
  using Error::Error;
};

}  // namespace metavl
