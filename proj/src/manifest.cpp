#include "mafr/manifest.hpp"

#include <fstream>
#include <unordered_set>

#include <json.hpp>

#include "mafr/errors.hpp"

namespace mafr {

namespace {

using json = nlohmann::ordered_json;

Label parse_label(const std::string& s) {
    if (s == "normal") return Label::Normal;
    if (s == "anomalous") return Label::Anomalous;
    throw FormatError("unknown label '" + s + "'");
}

Split parse_split(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "validation") return Split::Validation;
    if (s == "test") return Split::Test;
    throw FormatError("unknown split '" + s + "'");
}

void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed,
                         const std::string& where) {
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const char* a : allowed)
            if (key == a) ok = true;
        if (!ok) throw FormatError("unknown key '" + key + "' in " + where);
    }
}

} // namespace

std::string to_string(Label l) { return l == Label::Normal ? "normal" : "anomalous"; }

std::string to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Validation: return "validation";
        default: return "test";
    }
}

void validate(const DatasetManifest& m) {
    std::unordered_set<std::string> ids;
    for (const SampleEntry& s : m.samples) {
        if (s.id.empty()) throw FormatError("manifest sample with empty id");
        if (!ids.insert(s.id).second)
            throw FormatError("duplicate sample id '" + s.id + "'");
        if (s.path_2d.empty() || s.path_3d.empty())
            throw FormatError("sample '" + s.id + "' is missing a feature path");
        if (m.split == Split::Train && s.label != Label::Normal)
            throw FormatError("train split must contain only normal samples ('" + s.id + "')");
    }
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw FormatError("cannot open manifest: " + path.string());
    json j;
    try {
        j = json::parse(f);
    } catch (const json::exception& e) {
        throw FormatError("manifest parse error in " + path.string() + ": " + e.what());
    }

    try {
        reject_unknown_keys(j, {"split", "samples"}, "manifest");
        DatasetManifest m;
        m.split = parse_split(j.at("split").get<std::string>());
        for (const json& js : j.at("samples")) {
            reject_unknown_keys(js, {"id", "path_2d", "path_3d", "label", "mask_path"}, "sample");
            SampleEntry s;
            s.id = js.at("id").get<std::string>();
            s.path_2d = js.at("path_2d").get<std::string>();
            s.path_3d = js.at("path_3d").get<std::string>();
            s.label = parse_label(js.at("label").get<std::string>());
            if (js.contains("mask_path")) s.mask_path = js.at("mask_path").get<std::string>();
            m.samples.push_back(std::move(s));
        }
        validate(m);
        return m;
    } catch (const json::exception& e) {
        throw FormatError("malformed manifest " + path.string() + ": " + e.what());
    }
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
    validate(m);
    json j;
    j["split"] = to_string(m.split);
    j["samples"] = json::array();
    for (const SampleEntry& s : m.samples) {
        json js;
        js["id"] = s.id;
        js["path_2d"] = s.path_2d;
        js["path_3d"] = s.path_3d;
        js["label"] = to_string(s.label);
        if (s.mask_path) js["mask_path"] = *s.mask_path;
        j["samples"].push_back(std::move(js));
    }
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw FormatError("cannot write manifest: " + path.string());
    f << j.dump(2) << "\n";
    if (!f) throw FormatError("manifest write failed: " + path.string());
}

} // namespace mafr
