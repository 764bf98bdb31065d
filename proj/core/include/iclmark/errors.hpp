#pragma once

#include <stdexcept>

namespace iclmark {

/// Base class for every error the library raises deliberately.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : Error { using Error::Error; };
struct InputError : Error { using Error::Error; };
struct CapacityError : Error { using Error::Error; };
struct RenderError : Error { using Error::Error; };
struct BudgetError : Error { using Error::Error; };
struct TokenizerError : Error { using Error::Error; };
struct TrainingError : Error { using Error::Error; };
struct ProviderError : Error { using Error::Error; };
struct LabelMapError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };

}  // namespace iclmark
