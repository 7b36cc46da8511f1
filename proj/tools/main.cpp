#include <cstdio>

int main() {
  std::puts("msod: placeholder");
  return 0;
}
