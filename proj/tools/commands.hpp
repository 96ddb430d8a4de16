#pragma once

#include <filesystem>
#include <string>

#include "run_config.hpp"

namespace dverge::cli {

struct Invocation {
    std::string command;
    Json config;  // resolved
    std::filesystem::path out;
};

inline const char* const kCommands[] = {"gen-data",   "train",       "distill",         "diversity",        "transfer-matrix",
                                        "attack-eval", "decision-region", "sweep-eps", "convergence-check"};

/// Runs a subcommand in single or double precision. Each is defined by its own
/// compilation of commands.cpp.
int run_command_f32(const Invocation& inv);
int run_command_f64(const Invocation& inv);

}  // namespace dverge::cli
