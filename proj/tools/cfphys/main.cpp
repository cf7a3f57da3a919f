// SPDX-License-Identifier: Apache-2.0
#include "app.hpp"

int main(int argc, char** argv) {
    return cfphys::app::run(std::vector<std::string>(argv + 1, argv + argc));
}
