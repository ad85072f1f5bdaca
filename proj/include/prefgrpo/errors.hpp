#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace prefgrpo {

/// Base of every error raised by the library. `category()` is the short tag
/// printed by the CLI (e.g. "ConfigError").
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& what)
      : std::runtime_error(what), category_(std::move(category)) {}

  const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

#define PREFGRPO_DEFINE_ERROR(Name)                                      \
  class Name : public Error {                                            \
   public:                                                               \
    explicit Name(const std::string& what) : Error(#Name, what) {}      \
  };

PREFGRPO_DEFINE_ERROR(ShapeError)
PREFGRPO_DEFINE_ERROR(NumericsError)
PREFGRPO_DEFINE_ERROR(DomainError)
PREFGRPO_DEFINE_ERROR(ContractError)
PREFGRPO_DEFINE_ERROR(ConfigError)
PREFGRPO_DEFINE_ERROR(CheckpointError)
PREFGRPO_DEFINE_ERROR(ProtocolError)
PREFGRPO_DEFINE_ERROR(JudgeUnavailable)
PREFGRPO_DEFINE_ERROR(PlotError)

#undef PREFGRPO_DEFINE_ERROR

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(std::size_t step, const std::string& what)
      : Error("TrainingDiverged",
              what + " (step " + std::to_string(step) + ")"),
        step_(step) {}

  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace prefgrpo
