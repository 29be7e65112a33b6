#pragma once
// Batch pipeline entry points shared by the CLI and the test suites. Every
// artifact is written atomically and stamped with the config digest.

#include <filesystem>

#include "famh/config.hpp"
#include "famh/ingest.hpp"

namespace famh::commands {

void cmd_synth(const config::RunConfig& cfg);
void cmd_preprocess(const config::RunConfig& cfg);
void cmd_pretrain(const config::RunConfig& cfg, const std::filesystem::path& resume = {});
void cmd_finetune(const config::RunConfig& cfg, const std::filesystem::path& checkpoint);
void cmd_evaluate(const config::RunConfig& cfg, const std::filesystem::path& checkpoint);
void cmd_embed(const config::RunConfig& cfg, const std::filesystem::path& checkpoint);

// Loads the processed directory, keeping wear segments of at least
// min_wear_hours and materializing label tracks where a labels CSV exists.
ingest::RecordingStore load_processed(const config::RunConfig& cfg, double min_wear_hours);

std::string digest_hex(uint64_t digest);

}  // namespace famh::commands
