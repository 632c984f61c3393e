from uncprop.cli import main

main()
