#include "facectl/state.hpp"

namespace facectl {

namespace {

// Calls `f(name, tensor)` for parameter values and buffers alike.
class TensorVisitor : public StateVisitor {
 public:
  explicit TensorVisitor(std::function<void(const std::string&, Tensor&)> f) : f_(std::move(f)) {}
  void parameter(const std::string& name, Var& p) override { f_(name, p.mutable_value()); }
  void buffer(const std::string& name, Tensor& t) override { f_(name, t); }

 private:
  std::function<void(const std::string&, Tensor&)> f_;
};

}  // namespace

void save_state(Archive& archive, const StateVisit& visit) {
  TensorVisitor v([&](const std::string& name, Tensor& t) { archive.put(name, t); });
  visit(v);
}

void load_state(const Archive& archive, const StateVisit& visit) {
  TensorVisitor check([&](const std::string& name, Tensor& t) {
    if (!archive.contains(name)) throw ArchiveError("checkpoint is missing '" + name + "'");
    if (archive.shape(name) != t.shape())
      throw ArchiveError("checkpoint entry '" + name + "' has shape " + to_string(archive.shape(name)) +
                         ", the model expects " + to_string(t.shape()));
  });
  visit(check);
  TensorVisitor load([&](const std::string& name, Tensor& t) { t = archive.get(name); });
  visit(load);
}

void StateSnapshot::capture(const StateVisit& visit) {
  values_.clear();
  TensorVisitor v([&](const std::string&, Tensor& t) { values_.push_back(t); });
  visit(v);
}

void StateSnapshot::restore(const StateVisit& visit) const {
  std::size_t k = 0;
  TensorVisitor v([&](const std::string&, Tensor& t) { t = values_.at(k++); });
  visit(v);
}

}  // namespace facectl
