from l0_dynamics.cli import main

if __name__ == "__main__":
    main()
