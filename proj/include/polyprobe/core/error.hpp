#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace polyprobe {

// Every failure the library reports carries one of these codes so callers
// (and the CLI exit-code mapping) can branch without parsing messages.
enum class ErrorCode {
  ShapeMismatch,
  NonFinite,
  ZeroNorm,
  SvdFailure,
  NonScalarSeed,
  InvalidConfig,
  EmptySpec,
  Divergence,
  ContextOverflow,
  BadSite,
  ZeroProbe,
  EmptyCorpus,
  DeadFeature,
  NeverFires,
  TooFewFeatures,
  MissingGloss,
  NoLinearPath,
  ZeroGradient,
  AllGuarded,
  OverlapGuard,
  BadNeuron,
  EmptyTokenSet,
  MissingEmbedding,
  ZeroBaseline,
  CorruptFile,
  Io,
  ConfigError,
  StageFailure,
};

std::string_view error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) {
    fail(code, message);
  }
}

}  // namespace polyprobe
