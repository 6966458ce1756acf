#include <cstdio>

int main() {
    std::puts("nubseg CLI placeholder");
    return 0;
}
