#include "calscale/harness.hpp"

int main(int argc, char** argv) {
  return calscale::harness::run_cli(argc, argv);
}
