#pragma once

#include <stdexcept>
#include <string>

namespace dap {

// Base of every error the library raises. `kind()` is a short stable tag
// used in failure reports and CLI messages.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define DAP_DEFINE_ERROR(Name, tag)                              \
  class Name : public Error {                                    \
   public:                                                       \
    explicit Name(const std::string& what) : Error(tag, what) {} \
  };

DAP_DEFINE_ERROR(SizeError, "size")
DAP_DEFINE_ERROR(ShapeError, "shape")
DAP_DEFINE_ERROR(ConfigError, "config")
DAP_DEFINE_ERROR(NumericError, "numeric")
DAP_DEFINE_ERROR(FormatError, "format")
DAP_DEFINE_ERROR(StateError, "state")
DAP_DEFINE_ERROR(IoError, "io")
DAP_DEFINE_ERROR(EmptyCropError, "empty-crop")
DAP_DEFINE_ERROR(DegenerateDemoError, "degenerate-demo")
DAP_DEFINE_ERROR(InsufficientMatchesError, "insufficient-matches")
DAP_DEFINE_ERROR(DegenerateGeometryError, "degenerate-geometry")
DAP_DEFINE_ERROR(NoCandidatesError, "no-candidates")
DAP_DEFINE_ERROR(UsageError, "usage")
DAP_DEFINE_ERROR(ConvergenceError, "convergence")

#undef DAP_DEFINE_ERROR

}  // namespace dap
