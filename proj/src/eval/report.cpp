#include <cmath>
#include <sstream>

#include "mtclip/error.hpp"
#include "mtclip/evaluation.hpp"

namespace mtclip {

std::vector<std::string> seg_class_names(std::size_t num_classes) {
  std::vector<std::string> names{"background"};
  for (std::size_t c = 1; c < num_classes; ++c)
    names.push_back(c - 1 < kNumShapes ? shape_names()[c - 1] : "class" + std::to_string(c));
  names.resize(num_classes);
  return names;
}

std::vector<DeltaRow> classwise_delta_report(const MetricReport& a, const MetricReport& b,
                                             std::span<const std::uint64_t> class_pixels) {
  if (a.per_class.empty() || b.per_class.empty())
    throw ReportError("delta report needs per-class values on both sides");
  if (a.task != b.task || a.metric != b.metric)
    throw ReportError("delta report compares '" + a.task + "/" + a.metric + "' with '" + b.task +
                      "/" + b.metric + "'");
  if (a.per_class.size() != b.per_class.size())
    throw ReportError("class sets differ: " + std::to_string(a.per_class.size()) + " vs " +
                      std::to_string(b.per_class.size()) + " classes");
  if (class_pixels.size() != a.per_class.size())
    throw ReportError("frequency table has " + std::to_string(class_pixels.size()) +
                      " classes, reports have " + std::to_string(a.per_class.size()));
  const auto names = seg_class_names(a.per_class.size());
  std::vector<DeltaRow> rows;
  for (std::size_t c = 0; c < a.per_class.size(); ++c) {
    DeltaRow r;
    r.class_id = c;
    r.name = names[c];
    r.iou_a = a.per_class[c];
    r.iou_b = b.per_class[c];
    r.delta = r.iou_b - r.iou_a;
    r.frequency = class_pixels[c];
    rows.push_back(r);
  }
  return rows;
}

namespace {

std::string cell(double v) { return std::isfinite(v) ? format_double(v) : ""; }

}  // namespace

std::string delta_report_csv(const std::vector<DeltaRow>& rows) {
  std::ostringstream out;
  out << "class_id,class,iou_a,iou_b,delta,frequency\n";
  for (const auto& r : rows)
    out << r.class_id << ',' << r.name << ',' << cell(r.iou_a) << ',' << cell(r.iou_b) << ','
        << cell(r.delta) << ',' << r.frequency << '\n';
  return out.str();
}

std::vector<std::uint64_t> manifest_class_pixels(const std::filesystem::path& manifest) {
  const KeyValues kv = KeyValues::load(manifest.string());
  if (!kv.has("pseudo_class_pixels"))
    throw InputError("manifest '" + manifest.string() + "' has no pseudo_class_pixels");
  const auto sizes = kv.get_size_list("pseudo_class_pixels", {});
  return {sizes.begin(), sizes.end()};
}

}  // namespace mtclip
