// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace vqa::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/**
 * Runs the `vqa` driver. `args` excludes the program name. Returns the exit
 * code: 0 on success, 1 for usage or configuration errors (reported before
 * any work starts), 2 for failures while running.
 */
int run(const std::vector<std::string> &args, std::ostream &out, std::ostream &err);

/**
 * Reads a flat configuration file: one `key = value` per line, `#` starts a
 * comment, surrounding quotes around a value are removed. Throws
 * std::invalid_argument on a malformed line or a repeated key.
 */
std::vector<std::pair<std::string, std::string>> parse_config_file(const std::string &text);

} // namespace vqa::cli
