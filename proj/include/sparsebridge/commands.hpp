#pragma once
// The operator command suite. Every command reads an ExperimentConfig, works
// inside one run directory and returns a machine-readable summary that is
// also written to logs/<command>.json.
//
// Run directory layout:
//   config.json                    resolved config of the last command
//   data/corpus.json               subject split
//   data/{train,eval}/<subject>/{source,target}/
//   models/{bridge,encoder,control}.ckpt and *_loss.csv
//   kb/                            knowledge base
//   <variant>/<subject>/{volume/,plan.json}   reconstructions
//   reports/<variant>.{json,csv}
//   gradstats/
//   logs/<command>.json

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sparsebridge/config.hpp"
#include "sparsebridge/data.hpp"

namespace sparsebridge {

const std::vector<std::string> &command_names();

struct CommandArgs {
    // evaluate only: compare two arbitrary volume directories.
    std::optional<std::filesystem::path> pred, truth;
};

// Throws ConfigError for unknown commands and missing upstream artifacts.
nlohmann::json run_command(const std::string &name, const ExperimentConfig &config, const std::filesystem::path &run_dir,
                           const CommandArgs &args = {});

// Output directory name of a reconstruction setting, e.g. "recon",
// "recon_uncontrolled", "recon_interp", "recon_db050".
std::string reconstruction_name(const ReconstructConfig &rc);

// Paired volumes of a split ("train" or "eval") written by gen-data.
std::vector<PairedVolume> load_split(const std::filesystem::path &run_dir, const std::string &split);

} // namespace sparsebridge
