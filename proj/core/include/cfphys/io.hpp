// SPDX-License-Identifier: Apache-2.0
//
// Dataset files, hashing and the train/val/test split.
#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "cfphys/benchgen.hpp"

namespace cfphys::io {

enum class Split { train, val, test };
std::string to_string(Split s);

/// 80/10/10 by a 64-bit FNV-1a hash of the experiment id.
Split split_of(std::string_view id);

std::uint64_t fnv1a(std::string_view data);
std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

struct ExportOptions {
    /// > 0 also writes ab/ and cd/ PNG frame folders at this size.
    int frame_size = 0;
};

/// "<scenario>/<id>", relative to the dataset root.
std::string experiment_dir(const bench::Experiment& e);

/// Writes <root>/<scenario>/<id>/{meta.json, ab.csv, cd.csv} per experiment
/// and <root>/manifest.json. Returns the manifest hash: SHA-256 over the
/// sorted "path sha256" lines of the csv and meta files.
std::string export_dataset(const bench::Dataset& ds, const std::filesystem::path& root,
                           const ExportOptions& opt = {});
/// Reads a dataset written by export_dataset. PrereqError if missing.
bench::Dataset load_dataset(const std::filesystem::path& root);
/// Hash recorded in root/manifest.json.
std::string manifest_hash(const std::filesystem::path& root);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, std::string_view text);

} // namespace cfphys::io
