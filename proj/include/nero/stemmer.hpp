#pragma once

#include <string>
#include <string_view>

namespace nero {

/// Porter (1980) suffix-stripping stemmer. Input is expected lowercase ASCII;
/// entity-mask tokens (SUBJ-*, OBJ-*) are returned unchanged.
std::string porter_stem(std::string_view word);

}  // namespace nero
