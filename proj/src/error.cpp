#include "lmrl/error.hpp"

namespace lmrl {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::vocabulary: return "vocabulary";
    case ErrorKind::contract: return "contract";
    case ErrorKind::context_length: return "context_length";
    case ErrorKind::missing_grad: return "missing_grad";
    case ErrorKind::degenerate_input: return "degenerate_input";
    case ErrorKind::io: return "io";
    case ErrorKind::config: return "config";
    case ErrorKind::format: return "format";
    case ErrorKind::modality: return "modality";
  }
  return "unknown";
}

}  // namespace lmrl
