#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace mafr {

enum class Label { Normal, Anomalous };
enum class Split { Train, Validation, Test };

struct SampleEntry {
    std::string id;
    std::string path_2d;
    std::string path_3d;
    Label label = Label::Normal;
    std::optional<std::string> mask_path; // ground-truth H x W binary mask
};

struct DatasetManifest {
    Split split = Split::Train;
    std::vector<SampleEntry> samples;
};

std::string to_string(Label l);
std::string to_string(Split s);

// One JSON document per split. Throws FormatError on malformed JSON, unknown
// keys, duplicate ids, or a Train split containing anomalous samples.
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);

// Same structural checks as load_manifest, for manifests built in memory.
void validate(const DatasetManifest& m);

} // namespace mafr
