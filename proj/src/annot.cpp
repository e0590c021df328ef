// SPDX-License-Identifier: Apache-2.0
#include "arcnn/annot.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace arcnn::annot {

using nlohmann::json;

std::string to_string(Modality m) {
  return m == Modality::reference ? "reference" : "sensed";
}

Modality modality_from_string(const std::string& s) {
  if (s == "reference") return Modality::reference;
  if (s == "sensed") return Modality::sensed;
  throw std::runtime_error("unknown modality '" + s + "'");
}

namespace {

json box_to_json(const std::optional<geom::Box>& box) {
  if (!box) return nullptr;
  return json::array({box->x_min, box->y_min, box->width, box->height});
}

std::optional<geom::Box> box_from_json(const json& j, const std::string& where) {
  if (j.is_null()) return std::nullopt;
  if (!j.is_array() || j.size() != 4) {
    throw std::runtime_error(where + ": box must be [x,y,w,h] or null");
  }
  try {
    return geom::Box(j[0].get<double>(), j[1].get<double>(), j[2].get<double>(),
                     j[3].get<double>());
  } catch (const std::exception& e) {
    throw std::runtime_error(where + ": " + e.what());
  }
}

json frame_to_json(const FrameAnnotation& frame) {
  json objects = json::array();
  for (const PairedObject& obj : frame.objects) {
    objects.push_back({{"uid", obj.uid},
                       {"reference_box", box_to_json(obj.reference_box)},
                       {"sensed_box", box_to_json(obj.sensed_box)},
                       {"occluded", obj.occluded},
                       {"paired", obj.paired}});
  }
  return {{"frame_id", frame.frame_id},
          {"image_size", json::array({frame.image_width, frame.image_height})},
          {"objects", objects}};
}

json parse_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

}  // namespace

std::vector<FrameAnnotation> load_annotations(const std::filesystem::path& path) {
  const json doc = parse_file(path);
  if (!doc.is_object() || !doc.contains("frames") || !doc["frames"].is_array()) {
    throw std::runtime_error(path.string() + ": top-level 'frames' array missing");
  }
  std::vector<FrameAnnotation> frames;
  std::map<int64_t, std::string> seen_uids;
  for (const json& jf : doc["frames"]) {
    FrameAnnotation frame;
    if (!jf.contains("frame_id") || !jf["frame_id"].is_string()) {
      throw std::runtime_error(path.string() + ": frame missing 'frame_id'");
    }
    frame.frame_id = jf["frame_id"].get<std::string>();
    const std::string where = path.string() + " frame '" + frame.frame_id + "'";
    if (!jf.contains("image_size") || !jf["image_size"].is_array() ||
        jf["image_size"].size() != 2) {
      throw std::runtime_error(where + ": 'image_size' must be [w,h]");
    }
    frame.image_width = jf["image_size"][0].get<int>();
    frame.image_height = jf["image_size"][1].get<int>();
    if (!jf.contains("objects") || !jf["objects"].is_array()) {
      throw std::runtime_error(where + ": 'objects' array missing");
    }
    for (const json& jo : jf["objects"]) {
      PairedObject obj;
      if (!jo.contains("uid") || !jo["uid"].is_number_integer()) {
        throw std::runtime_error(where + ": object missing integer 'uid'");
      }
      obj.uid = jo["uid"].get<int64_t>();
      const std::string owhere = where + " uid " + std::to_string(obj.uid);
      obj.reference_box = box_from_json(jo.value("reference_box", json()), owhere + " reference_box");
      obj.sensed_box = box_from_json(jo.value("sensed_box", json()), owhere + " sensed_box");
      obj.occluded = jo.value("occluded", false);
      if (!jo.contains("paired") || !jo["paired"].is_boolean()) {
        throw std::runtime_error(owhere + ": 'paired' flag missing");
      }
      obj.paired = jo["paired"].get<bool>();
      if (!obj.reference_box && !obj.sensed_box) {
        throw std::runtime_error(owhere + ": at least one box must be present");
      }
      const bool both = obj.reference_box.has_value() && obj.sensed_box.has_value();
      if (obj.paired != both) {
        throw std::runtime_error(owhere + ": paired flag inconsistent with boxes");
      }
      auto [it, inserted] = seen_uids.emplace(obj.uid, frame.frame_id);
      if (!inserted) {
        throw std::runtime_error(path.string() + ": duplicate uid " +
                                 std::to_string(obj.uid) + " in frames '" +
                                 it->second + "' and '" + frame.frame_id + "'");
      }
      frame.objects.push_back(obj);
    }
    frames.push_back(std::move(frame));
  }
  return frames;
}

void save_annotations(const std::filesystem::path& path,
                      std::span<const FrameAnnotation> frames) {
  json doc;
  doc["frames"] = json::array();
  for (const FrameAnnotation& frame : frames) {
    doc["frames"].push_back(frame_to_json(frame));
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << doc.dump(2) << "\n";
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::vector<Detection> load_detections(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<Detection> detections;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                               ": " + e.what());
    }
    const std::string where = path.string() + ":" + std::to_string(line_no);
    Detection det;
    det.frame_id = j.at("frame_id").get<std::string>();
    auto box = box_from_json(j.at("box"), where);
    if (!box) throw std::runtime_error(where + ": box must not be null");
    det.box = *box;
    det.score = j.at("score").get<double>();
    det.modality = modality_from_string(j.at("modality").get<std::string>());
    detections.push_back(det);
  }
  return detections;
}

void save_detections(const std::filesystem::path& path,
                     std::span<const Detection> detections) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (const Detection& det : detections) {
    json j = {{"frame_id", det.frame_id},
              {"box", json::array({det.box.x_min, det.box.y_min, det.box.width,
                                   det.box.height})},
              {"score", det.score},
              {"modality", to_string(det.modality)}};
    out << j.dump() << "\n";
  }
}

std::vector<Diagnostic> validate_annotation_file(const std::filesystem::path& path) {
  std::vector<Diagnostic> diags;
  json doc;
  try {
    doc = parse_file(path);
  } catch (const std::exception& e) {
    diags.push_back({"", -1, e.what()});
    return diags;
  }
  if (!doc.is_object() || !doc.contains("frames") || !doc["frames"].is_array()) {
    diags.push_back({"", -1, "top-level 'frames' array missing"});
    return diags;
  }
  std::map<int64_t, std::string> seen_uids;
  for (const json& jf : doc["frames"]) {
    std::string frame_id = jf.value("frame_id", std::string("<missing frame_id>"));
    if (!jf.contains("frame_id") || !jf["frame_id"].is_string()) {
      diags.push_back({frame_id, -1, "frame missing string 'frame_id'"});
    }
    double img_w = 0.0, img_h = 0.0;
    if (!jf.contains("image_size") || !jf["image_size"].is_array() ||
        jf["image_size"].size() != 2) {
      diags.push_back({frame_id, -1, "'image_size' must be [w,h]"});
    } else {
      img_w = jf["image_size"][0].get<double>();
      img_h = jf["image_size"][1].get<double>();
    }
    if (!jf.contains("objects") || !jf["objects"].is_array()) {
      diags.push_back({frame_id, -1, "'objects' array missing"});
      continue;
    }
    for (const json& jo : jf["objects"]) {
      if (!jo.contains("uid") || !jo["uid"].is_number_integer()) {
        diags.push_back({frame_id, -1, "object missing integer 'uid'"});
        continue;
      }
      const int64_t uid = jo["uid"].get<int64_t>();
      auto [it, inserted] = seen_uids.emplace(uid, frame_id);
      if (!inserted) {
        diags.push_back({frame_id, uid,
                         "duplicate uid " + std::to_string(uid) + " (also in frame '" +
                             it->second + "')"});
      }
      std::optional<geom::Box> ref, sen;
      bool box_error = false;
      try {
        ref = box_from_json(jo.value("reference_box", json()), "reference_box");
      } catch (const std::exception& e) {
        diags.push_back({frame_id, uid, e.what()});
        box_error = true;
      }
      try {
        sen = box_from_json(jo.value("sensed_box", json()), "sensed_box");
      } catch (const std::exception& e) {
        diags.push_back({frame_id, uid, e.what()});
        box_error = true;
      }
      if (!jo.contains("paired") || !jo["paired"].is_boolean()) {
        diags.push_back({frame_id, uid, "'paired' flag missing"});
      } else if (!box_error) {
        const bool paired = jo["paired"].get<bool>();
        if (!ref && !sen) {
          diags.push_back({frame_id, uid, "at least one box must be present"});
        } else if (paired != (ref.has_value() && sen.has_value())) {
          diags.push_back({frame_id, uid, "paired flag inconsistent with boxes"});
        }
      }
      // Truncation at edges is allowed; a box must still intersect the image.
      for (const auto& [name, box] : {std::pair{"reference_box", ref},
                                      std::pair{"sensed_box", sen}}) {
        if (box && img_w > 0 && img_h > 0 &&
            (box->x_max() <= 0 || box->y_max() <= 0 || box->x_min >= img_w ||
             box->y_min >= img_h)) {
          diags.push_back({frame_id, uid,
                           std::string(name) + " lies entirely outside image bounds"});
        }
      }
    }
  }
  return diags;
}

ShiftStats shift_statistics(std::span<const FrameAnnotation> frames) {
  ShiftStats stats;
  std::vector<double> dxs, dys;
  double max_dist = 0.0;
  std::vector<double> dists;
  for (const FrameAnnotation& frame : frames) {
    for (const PairedObject& obj : frame.objects) {
      if (!obj.paired) {
        ++stats.unpaired_count;
        continue;
      }
      ++stats.paired_count;
      const double dx = obj.sensed_box->center_x() - obj.reference_box->center_x();
      const double dy = obj.sensed_box->center_y() - obj.reference_box->center_y();
      dxs.push_back(dx);
      dys.push_back(dy);
      const double dist = std::hypot(dx, dy);
      dists.push_back(dist);
      max_dist = std::max(max_dist, dist);
    }
  }
  if (!dists.empty()) {
    stats.histogram.assign(static_cast<size_t>(std::floor(max_dist)) + 1, 0);
    for (double d : dists) ++stats.histogram[static_cast<size_t>(std::floor(d))];
    auto mean = [](const std::vector<double>& v) {
      double s = 0.0;
      for (double x : v) s += x;
      return s / static_cast<double>(v.size());
    };
    stats.mean_x = mean(dxs);
    stats.mean_y = mean(dys);
    auto pop_std = [](const std::vector<double>& v, double m) {
      double s = 0.0;
      for (double x : v) s += (x - m) * (x - m);
      return std::sqrt(s / static_cast<double>(v.size()));
    };
    stats.std_x = pop_std(dxs, stats.mean_x);
    stats.std_y = pop_std(dys, stats.mean_y);
  }
  return stats;
}

std::vector<FrameAnnotation> reasonable_filter(std::vector<FrameAnnotation> frames,
                                               double min_height,
                                               bool allow_occluded) {
  if (!(min_height > 0.0)) {
    throw std::invalid_argument("reasonable_filter: min_height must be > 0");
  }
  for (FrameAnnotation& frame : frames) {
    for (PairedObject& obj : frame.objects) {
      const double height = obj.reference_box ? obj.reference_box->height
                                              : obj.sensed_box->height;
      obj.ignore = height < min_height || (obj.occluded && !allow_occluded);
    }
  }
  return frames;
}

std::vector<FrameAnnotation> shift_all_sensed(std::vector<FrameAnnotation> frames,
                                              double dx, double dy) {
  for (FrameAnnotation& frame : frames) {
    for (PairedObject& obj : frame.objects) {
      if (obj.sensed_box) {
        obj.sensed_box = geom::Box(obj.sensed_box->x_min + dx,
                                   obj.sensed_box->y_min + dy,
                                   obj.sensed_box->width, obj.sensed_box->height);
      }
    }
  }
  return frames;
}

}  // namespace arcnn::annot
