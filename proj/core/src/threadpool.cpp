#include "voxloc/threadpool.hpp"

#include <memory>

namespace voxloc {

namespace {
std::unique_ptr<ThreadPool>& pool_slot() {
  static std::unique_ptr<ThreadPool> pool;
  return pool;
}
}  // namespace

ThreadPool& ThreadPool::global() {
  auto& slot = pool_slot();
  if (!slot) {
    unsigned hw = std::thread::hardware_concurrency();
    slot = std::make_unique<ThreadPool>(hw ? hw : 1);
  }
  return *slot;
}

void ThreadPool::set_global_threads(std::size_t threads) {
  pool_slot() = std::make_unique<ThreadPool>(threads);
}

}  // namespace voxloc
