#pragma once

// Vessel candidates found by a model but missing from the manual labels, and
// merging of the ones a reviewer accepted.

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "renalseg/postprocess.hpp"

namespace renalseg {

enum class CandidateStatus { pending, accepted, rejected };

inline const char* to_string(CandidateStatus s) {
    switch (s) {
        case CandidateStatus::pending: return "pending";
        case CandidateStatus::accepted: return "accepted";
        case CandidateStatus::rejected: return "rejected";
    }
    return "?";
}

inline CandidateStatus candidate_status_from(const std::string& s) {
    if (s == "pending") return CandidateStatus::pending;
    if (s == "accepted" || s == "accept") return CandidateStatus::accepted;
    if (s == "rejected" || s == "reject") return CandidateStatus::rejected;
    throw UsageError("unknown candidate status '" + s + "'");
}

struct Candidate {
    int id = 0;
    std::uint8_t cls = kArtery;
    Component component;
    CandidateStatus status = CandidateStatus::pending;
};

struct CandidateManifest {
    std::string case_id;
    Index3 shape{0, 0, 0};
    Geometry geometry;
    std::vector<Candidate> candidates;
};

/// Predicted vessel voxels that are background in the manual labels, split
/// into 26-connected components per class. A voxel claimed by both classes
/// goes to the artery.
inline CandidateManifest extract_candidates(const LabelVolume& prediction, const LabelVolume& manual,
                                            const std::string& case_id = {}) {
    require_same_grid(prediction, manual, "extract_candidates");
    LabelVolume extra = manual.like<std::uint8_t>();
    for (std::size_t i = 0; i < extra.size(); ++i) {
        const auto p = prediction.data[i];
        if (manual.data[i] == kBackground && (p == kArtery || p == kVein)) extra.data[i] = p;
    }
    CandidateManifest m{case_id, manual.shape, manual.geometry, {}};
    int next = 1;
    for (std::uint8_t cls : {std::uint8_t(kArtery), std::uint8_t(kVein)})
        for (auto& c : class_components(extra, cls, 26)) m.candidates.push_back({next++, cls, std::move(c), CandidateStatus::pending});
    return m;
}

/// Same as above for two separate predictions of one class map each, e.g.
/// two runs that disagree. Overlapping voxels are assigned to the artery.
inline CandidateManifest extract_candidates(const LabelVolume& artery_pred, const LabelVolume& vein_pred,
                                            const LabelVolume& manual, const std::string& case_id) {
    require_same_grid(artery_pred, manual, "extract_candidates");
    require_same_grid(vein_pred, manual, "extract_candidates");
    LabelVolume merged = manual.like<std::uint8_t>();
    for (std::size_t i = 0; i < merged.size(); ++i) {
        if (artery_pred.data[i] == kArtery) merged.data[i] = kArtery;
        else if (vein_pred.data[i] == kVein) merged.data[i] = kVein;
    }
    return extract_candidates(merged, manual, case_id);
}

/// Paints accepted candidates onto the manual labels without touching any
/// voxel the manual labels already claim.
inline LabelVolume apply_decisions(const LabelVolume& manual, const CandidateManifest& m,
                                   const std::map<int, CandidateStatus>& decisions) {
    if (manual.shape != m.shape) throw GeometryMismatch("apply_decisions: manual labels do not match the manifest grid");
    std::map<int, const Candidate*> by_id;
    for (const auto& c : m.candidates) by_id[c.id] = &c;
    for (const auto& [id, _] : decisions)
        if (!by_id.count(id)) throw DataError("apply_decisions: unknown candidate id " + std::to_string(id));
    LabelVolume out = manual;
    for (const auto& c : m.candidates) {
        auto it = decisions.find(c.id);
        if (it == decisions.end() || it->second == CandidateStatus::pending)
            throw DataError("apply_decisions: candidate " + std::to_string(c.id) + " has no decision");
        if (it->second != CandidateStatus::accepted) continue;
        for (auto i : c.component.voxels)
            if (out.data[i] == kBackground && manual.data[i] == kBackground) out.data[i] = c.cls;
    }
    return out;
}

inline nlohmann::json to_json(const CandidateManifest& m) {
    nlohmann::json j;
    j["case"] = m.case_id;
    j["shape"] = m.shape;
    j["candidates"] = nlohmann::json::array();
    for (const auto& c : m.candidates)
        j["candidates"].push_back({{"case", m.case_id},
                                   {"id", c.id},
                                   {"class", default_class_table().at(c.cls)},
                                   {"voxel_count", c.component.voxel_count},
                                   {"volume_mm3", c.component.volume_mm3},
                                   {"bbox", {{"lo", c.component.bbox.lo}, {"hi", c.component.bbox.hi}}},
                                   {"status", to_string(c.status)}});
    return j;
}

/// Decisions file: {"decisions": {"<id>": "accept" | "reject"}} or the
/// manifest itself with edited "status" fields.
inline std::map<int, CandidateStatus> decisions_from_json(const nlohmann::json& j) {
    std::map<int, CandidateStatus> out;
    if (j.contains("decisions")) {
        for (const auto& [k, v] : j.at("decisions").items()) {
            std::size_t used = 0;
            int id = 0;
            try {
                id = std::stoi(k, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != k.size()) throw DataError("decisions: candidate key '" + k + "' is not an integer id");
            out[id] = candidate_status_from(v.get<std::string>());
        }
    } else if (j.contains("candidates")) {
        for (const auto& c : j.at("candidates")) out[c.at("id").get<int>()] = candidate_status_from(c.at("status").get<std::string>());
    } else {
        throw DataError("decisions: expected a 'decisions' object or a 'candidates' list");
    }
    return out;
}

/// Candidate voxels as a label volume, for viewing next to the manual labels.
inline LabelVolume candidate_mask(const CandidateManifest& m) {
    LabelVolume out(m.shape, m.geometry);
    for (const auto& c : m.candidates)
        for (auto i : c.component.voxels) out.data[i] = c.cls;
    return out;
}

}  // namespace renalseg
