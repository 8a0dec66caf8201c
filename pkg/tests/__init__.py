# Test suite for shiftcp
