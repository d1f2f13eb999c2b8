#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>

#include "gdkvm/training.hpp"

namespace gdkvm {

// `key = value` per line; '#' starts a comment. Throws std::invalid_argument
// naming the line for malformed or duplicated keys.
std::map<std::string, std::string> parse_key_values(std::istream& is);

// Recognised keys:
//   steps batch lr weight_decay clip augment eval_every eval_videos eval_seed
//   seed seeds frames size axis_a axis_b amplitude period speckle
//   key_dim value_dim hidden decoder_hidden strategy kpff normalize
// Booleans accept on/off, true/false, 1/0; seeds is a comma list.
void apply_config(TrainConfig& cfg, const std::map<std::string, std::string>& kv);
TrainConfig load_train_config(const std::filesystem::path& path);

bool parse_bool(const std::string& s);

}  // namespace gdkvm
