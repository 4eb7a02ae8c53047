#include "rawformer/errors.hpp"

namespace rawformer {

FormatError::FormatError(const std::string& what, std::uint64_t offset)
    : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

}  // namespace rawformer
