from fedval.cli import main

main()
