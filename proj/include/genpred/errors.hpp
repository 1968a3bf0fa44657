#pragma once

#include <stdexcept>
#include <string>

namespace genpred {

// Base of every domain error raised by the library. The CLI maps these to
// exit code 1; UsageError maps to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define GENPRED_DECLARE_ERROR(Name)          \
  class Name : public Error {               \
   public:                                  \
    explicit Name(const std::string& what)  \
        : Error(#Name ": " + what) {}       \
  }

// general
GENPRED_DECLARE_ERROR(InvalidArgument);
// grid-env
GENPRED_DECLARE_ERROR(InvalidSpec);
GENPRED_DECLARE_ERROR(InfeasibleSpec);
GENPRED_DECLARE_ERROR(EpisodeFinished);
// tensor-nn
GENPRED_DECLARE_ERROR(ShapeMismatch);
GENPRED_DECLARE_ERROR(NoForwardRecorded);
// ppo-core
GENPRED_DECLARE_ERROR(MaskMismatch);
GENPRED_DECLARE_ERROR(NonFiniteLoss);
// weight-features
GENPRED_DECLARE_ERROR(ZeroVariance);
GENPRED_DECLARE_ERROR(AllFiltered);
GENPRED_DECLARE_ERROR(BadMagic);
GENPRED_DECLARE_ERROR(VersionUnsupported);
GENPRED_DECLARE_ERROR(TruncatedFile);
// gen-predictor
GENPRED_DECLARE_ERROR(TooFewSamples);
// dataset-forge
GENPRED_DECLARE_ERROR(EmptyEvalSet);
GENPRED_DECLARE_ERROR(MissingWeights);
GENPRED_DECLARE_ERROR(HashMismatch);
GENPRED_DECLARE_ERROR(InvalidConfig);
// exp-harness
GENPRED_DECLARE_ERROR(SeedCollision);
GENPRED_DECLARE_ERROR(EmptyInput);
// cli
GENPRED_DECLARE_ERROR(UsageError);

#undef GENPRED_DECLARE_ERROR

}  // namespace genpred
