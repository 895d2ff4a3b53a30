// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <string>

namespace moeplace {

/// Formats a double with up to `sig` significant digits ("%.Ng"). All CSV
/// and report emitters go through here so repeated runs stay byte-identical.
inline std::string fmt_double(double v, int sig = 12) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*g", sig, v);
    return buf;
}

} // namespace moeplace
