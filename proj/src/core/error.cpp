#include "polyprobe/core/error.hpp"

namespace polyprobe {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::ZeroNorm: return "ZeroNorm";
    case ErrorCode::SvdFailure: return "SvdFailure";
    case ErrorCode::NonScalarSeed: return "NonScalarSeed";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::EmptySpec: return "EmptySpec";
    case ErrorCode::Divergence: return "Divergence";
    case ErrorCode::ContextOverflow: return "ContextOverflow";
    case ErrorCode::BadSite: return "BadSite";
    case ErrorCode::ZeroProbe: return "ZeroProbe";
    case ErrorCode::EmptyCorpus: return "EmptyCorpus";
    case ErrorCode::DeadFeature: return "DeadFeature";
    case ErrorCode::NeverFires: return "NeverFires";
    case ErrorCode::TooFewFeatures: return "TooFewFeatures";
    case ErrorCode::MissingGloss: return "MissingGloss";
    case ErrorCode::NoLinearPath: return "NoLinearPath";
    case ErrorCode::ZeroGradient: return "ZeroGradient";
    case ErrorCode::AllGuarded: return "AllGuarded";
    case ErrorCode::OverlapGuard: return "OverlapGuard";
    case ErrorCode::BadNeuron: return "BadNeuron";
    case ErrorCode::EmptyTokenSet: return "EmptyTokenSet";
    case ErrorCode::MissingEmbedding: return "MissingEmbedding";
    case ErrorCode::ZeroBaseline: return "ZeroBaseline";
    case ErrorCode::CorruptFile: return "CorruptFile";
    case ErrorCode::Io: return "Io";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::StageFailure: return "StageFailure";
  }
  return "Unknown";
}

}  // namespace polyprobe
